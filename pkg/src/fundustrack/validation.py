"""Input validation helpers for array-based pipeline operations.

The pixel pipeline follows the scikit-image convention: grayscale images are
2-D float arrays with values in [0, 1], masks are 2-D boolean arrays, RGB
rasters are (H, W, 3) uint8 arrays. These helpers coerce and check shapes the
way ``sklearn.utils.check_array`` does for tabular data.
"""

from __future__ import annotations

import numpy as np

from .errors import BadParams


def check_rgb_array(arr, name: str = "image") -> np.ndarray:
    """Validate an (H, W, 3) uint8 RGB raster."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise BadParams(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.integer) and arr.min() >= 0 and arr.max() <= 255:
            arr = arr.astype(np.uint8)
        else:
            raise BadParams(f"{name} must be uint8 in [0, 255], got dtype {arr.dtype}")
    return arr


def check_gray_array(arr, name: str = "image") -> np.ndarray:
    """Validate a 2-D grayscale array with values in [0, 1]; returns float64."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise BadParams(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise BadParams(f"{name} is empty")
    lo, hi = float(arr.min()), float(arr.max())
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise BadParams(f"{name} contains non-finite values")
    if lo < 0.0 or hi > 1.0:
        raise BadParams(f"{name} values must lie in [0, 1], got [{lo}, {hi}]")
    return arr


def check_mask_array(arr, name: str = "mask") -> np.ndarray:
    """Validate a 2-D boolean mask; accepts 0/1 integer arrays."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise BadParams(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        if np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.floating):
            uniq = np.unique(arr)
            if not np.all(np.isin(uniq, (0, 1))):
                raise BadParams(f"{name} must be binary, found values {uniq[:8]}")
            arr = arr.astype(bool)
        else:
            raise BadParams(f"{name} has unsupported dtype {arr.dtype}")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape[:2] != b.shape[:2]:
        raise BadParams(f"{what} have mismatched shapes: {a.shape} vs {b.shape}")
