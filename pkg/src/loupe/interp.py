"""Bilinear resampling with half-pixel centers, shared by data and viz."""
from __future__ import annotations

import numpy as np


def axis_weights(src: int, dst: int):
    """Index pairs and weights mapping ``dst`` samples onto ``src`` samples.

    Source coordinate is (i + 0.5) * src / dst - 0.5, clamped to [0, src - 1].
    """
    coord = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    coord = np.clip(coord, 0.0, src - 1)
    lo = np.floor(coord).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = coord - lo
    return lo, hi, frac


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the last two axes of ``arr``."""
    h, w = arr.shape[-2:]
    if (h, w) == (height, width):
        return arr.copy()
    r0, r1, fr = axis_weights(h, height)
    c0, c1, fc = axis_weights(w, width)
    fr = fr.astype(arr.dtype)[:, None]
    fc = fc.astype(arr.dtype)
    rows = arr[..., r0, :] * (1 - fr) + arr[..., r1, :] * fr
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc
