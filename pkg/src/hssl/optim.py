"""AdamW, cosine schedules and gradient clipping."""

from __future__ import annotations

import numpy as np

from .errors import CheckpointError, ParameterError


def cosine_schedule(base: float, final: float, total_steps: int, warmup_steps: int = 0,
                    warmup_start: float = 0.0) -> np.ndarray:
    """Per-step values: linear warmup, then half-cosine from ``base`` to ``final``."""
    total_steps = max(int(total_steps), 1)
    warmup_steps = min(max(int(warmup_steps), 0), total_steps)
    warm = np.linspace(warmup_start, base, warmup_steps, endpoint=False) if warmup_steps else np.zeros(0)
    rest = total_steps - warmup_steps
    t = np.arange(rest) / max(rest, 1)
    cos = final + 0.5 * (base - final) * (1 + np.cos(np.pi * t))
    return np.concatenate([warm, cos])


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm and max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


class AdamW:
    """Adam with decoupled weight decay applied to matrices only.

    Moments are float32 so a checkpointed optimizer resumes bit-identically.
    """

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.04):
        self.params = dict(named_params)
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ParameterError(f"betas must lie in [0, 1), got {betas}")
        self.betas = tuple(float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float, weight_decay: float | None = None):
        wd = self.weight_decay if weight_decay is None else float(weight_decay)
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None or not p.requires_grad:
                continue
            f = p.dtype.type
            g = p.grad.astype(p.dtype)
            m = self.m[name] = self.m[name] * f(b1) + g * f(1 - b1)
            v = self.v[name] = self.v[name] * f(b2) + g * g * f(1 - b2)
            update = (m / f(c1)) / (np.sqrt(v / f(c2)) + f(self.eps))
            if wd and p.ndim >= 2:
                update = update + p.data * f(wd)
            p.data = (p.data - f(lr) * update).astype(p.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict):
        for key in ("m", "v"):
            missing = set(self.params) - set(state[key])
            if missing:
                raise CheckpointError(f"optimizer state lacks {key} for {sorted(missing)[:3]}")
        self.t = int(state["t"])
        self.m = {k: np.array(state["m"][k], dtype=self.params[k].dtype) for k in self.params}
        self.v = {k: np.array(state["v"][k], dtype=self.params[k].dtype) for k in self.params}
