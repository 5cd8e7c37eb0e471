"""Bilinear resampling matrices (half-pixel centres, corners not aligned)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def _bilinear_1d(out_size: int, in_size: int, start: float, length: float) -> np.ndarray:
    # sample centre k of the output maps to start + (k + 0.5) * length / out_size - 0.5 in input pixels
    a = np.zeros((out_size, in_size), dtype=np.float64)
    scale = length / out_size
    for k in range(out_size):
        src = start + (k + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        a[k, lo] += 1.0 - frac
        a[k, hi] += frac
    a.setflags(write=False)
    return a


def bilinear_matrix(out_size: int, in_size: int, start: float = 0.0, length: float | None = None) -> np.ndarray:
    """Row-stochastic ``[out_size, in_size]`` matrix resizing a 1-D signal.

    ``start``/``length`` select a (possibly fractional) window of the input,
    which is how crops are folded into the resize.
    """
    return _bilinear_1d(int(out_size), int(in_size), float(start),
                        float(in_size if length is None else length))


def grid_resize_matrix(out_side: int, in_side: int) -> np.ndarray:
    """``[out_side**2, in_side**2]`` operator resizing a raster-ordered square grid."""
    a = bilinear_matrix(out_side, in_side)
    return np.kron(a, a)
