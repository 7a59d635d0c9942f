"""Separable bicubic resampling with the Keys kernel (a = -0.5).

Downscaling stretches the kernel by the scale factor (antialiasing);
samples outside the image are clamped to the nearest edge pixel.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, as_tensor4

KEYS_A = -0.5


def keys_kernel(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix mapping one axis to a new length.

    Cached; the returned array is read-only.
    """
    ratio = n_in / n_out
    stretch = max(ratio, 1.0)
    support = 2.0 * stretch
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) * ratio - 0.5
        taps = np.arange(math.floor(centre - support), math.ceil(centre + support) + 1)
        weights = keys_kernel((centre - taps) / stretch)
        weights /= weights.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), weights)
    m.setflags(write=False)
    return m


def _apply(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    out = np.matmul(np.matmul(rows, x.astype(np.float64)), cols.T)
    return np.ascontiguousarray(out, dtype=x.dtype)


def bicubic_downscale(hr, r: int) -> np.ndarray:
    hr = as_tensor4(hr)
    h, w = hr.shape[2:]
    if r < 1 or h % r or w % r:
        raise ShapeError(f"bicubic_downscale: {h}x{w} not divisible by {r}")
    if r == 1:
        return hr.copy()
    return _apply(hr, resize_matrix(h, h // r), resize_matrix(w, w // r))


def bicubic_upscale(lr, r: int) -> np.ndarray:
    lr = as_tensor4(lr)
    if r < 1:
        raise ValueError(f"upscale factor must be >= 1, got {r}")
    h, w = lr.shape[2:]
    if r == 1:
        return lr.copy()
    return _apply(lr, resize_matrix(h, h * r), resize_matrix(w, w * r))
