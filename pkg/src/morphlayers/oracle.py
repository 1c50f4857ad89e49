"""Exact grayscale erosion, dilation, opening and closing.

Brute-force windows; fine at 28x28 images and 7x7 structuring functions.
The structuring function is applied as ``b(x - y)``, i.e. reflected through
its origin, for both erosion and dilation.
"""

from __future__ import annotations

import numpy as np

from .image import EDGE, PadMode, as_image, as_kernel, windows

# Stand-in for -inf in flat structuring functions. Cells at or below it are
# outside the support and never take part in a min/max.
NEG_INF = -np.finfo(np.float64).max


def support(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.isfinite(b) & (b > NEG_INF)


def flat_kernel(mask) -> np.ndarray:
    """Flat structuring function: 0 on the mask, ``NEG_INF`` elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1] or mask.shape[0] % 2 != 1:
        raise ValueError(f"mask must be square with odd side, got shape {mask.shape}")
    return np.where(mask, 0.0, NEG_INF)


def _reflected(b):
    b = as_kernel(b, allow_sentinel=True)
    return b[::-1, ::-1], support(b)[::-1, ::-1]


def _windows(f, side, mode: PadMode, neutral: float):
    if mode.kind != "clip":
        return windows(f, side, mode)
    r = side // 2
    widths = [(0, 0)] * (f.ndim - 2) + [(r, r)] * 2
    padded = np.pad(f, widths, mode="constant", constant_values=neutral)
    return np.lib.stride_tricks.sliding_window_view(padded, (side, side), axis=(-2, -1))


def erode(f, b, mode: PadMode = EDGE) -> np.ndarray:
    """``min_y f(y) - b(x - y)`` over the support of ``b``."""
    f = as_image(f, batched=True)
    bt, inside = _reflected(b)
    vals = _windows(f, bt.shape[0], mode, np.inf) - np.where(inside, bt, 0.0)
    return np.where(inside, vals, np.inf).min(axis=(-2, -1))


def dilate(f, b, mode: PadMode = EDGE) -> np.ndarray:
    """``max_y f(y) + b(x - y)`` over the support of ``b``."""
    f = as_image(f, batched=True)
    bt, inside = _reflected(b)
    vals = _windows(f, bt.shape[0], mode, -np.inf) + np.where(inside, bt, 0.0)
    return np.where(inside, vals, -np.inf).max(axis=(-2, -1))


def opening(f, b, mode: PadMode = EDGE) -> np.ndarray:
    return dilate(erode(f, b, mode), b, mode)


def closing(f, b, mode: PadMode = EDGE) -> np.ndarray:
    return erode(dilate(f, b, mode), b, mode)
