"""Central-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NumericalError
from .tensor import Tensor, no_grad


def gradient_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
                   max_coords: int | None = None, seed: int = 0, floor: float = 1e-8) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    ``x`` is either an array (wrapped in a fresh tensor per evaluation) or a
    tensor such as a module parameter, which is perturbed in place and
    restored. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; raise ``floor`` for objectives whose
    gradients are exactly zero in some coordinates, where the ratio is pure
    round-off. ``max_coords`` checks a seeded random subset of coordinates.
    """
    if isinstance(x, Tensor):
        target = x
        was = target.requires_grad
        target.requires_grad = True
    else:
        target = Tensor(np.array(x, copy=True), requires_grad=True)
        was = True

    def evaluate() -> float:
        with no_grad():
            val = f(target).data
        val = float(np.asarray(val).reshape(-1)[0])
        if not np.isfinite(val):
            raise NumericalError("objective is not finite in the step neighbourhood")
        return val

    try:
        target.grad = None
        loss = f(target)
        if not np.isfinite(loss.data).all():
            raise NumericalError("objective is not finite at the check point")
        loss.backward()
        analytic = np.zeros_like(target.data) if target.grad is None else target.grad.copy()
        flat = target.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        return worst
    finally:
        target.grad = None
        target.requires_grad = was
