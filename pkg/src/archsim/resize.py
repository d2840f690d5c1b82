"""Bilinear resize used whenever a batch crosses models of different resolution.

Convention: half-pixel centres (``src = (dst + 0.5) * in / out - 0.5``),
source coordinates clamped to the valid range, no antialiasing.  This is the
``align_corners=False`` rule of common frameworks with antialias disabled.
"""
from __future__ import annotations

import numpy as np


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a ``(N, H, W, C)`` batch to ``(N, height, width, C)``."""
    x = np.asarray(images)
    n, h, w, c = x.shape
    if (h, w) == (height, width):
        return x
    y0, y1, fy = _axis_weights(h, height)
    x0, x1, fx = _axis_weights(w, width)
    fy = fy.astype(x.dtype)[None, :, None, None]
    fx = fx.astype(x.dtype)[None, None, :, None]
    rows = x[:, y0] * (1 - fy) + x[:, y1] * fy
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def to_resolution(images: np.ndarray, resolution) -> np.ndarray:
    h, w, c = resolution
    if images.shape[-1] != c:
        raise ValueError(f"channel mismatch: batch has {images.shape[-1]}, model expects {c}")
    return resize_bilinear(images, h, w)
