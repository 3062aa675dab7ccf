"""Input validation helpers shared by the estimator API and the CLI."""

from __future__ import annotations

import numpy as np


def check_image(x) -> np.ndarray:
    """Coerce one image to a finite float64 (H, W, 3) grid, H and W % 8 == 0."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    h, w, _ = arr.shape
    if h % 8 or w % 8:
        raise ValueError(f"image extents must be divisible by 8, got {h}x{w}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def check_image_batch(X) -> list[np.ndarray]:
    """Accept a single image, a stacked (n, H, W, 3) array, or a sequence."""
    arr = np.asarray(X, dtype=np.float64) if not isinstance(X, (list, tuple)) else X
    if isinstance(arr, np.ndarray) and arr.ndim == 3:
        return [check_image(arr)]
    return [check_image(item) for item in arr]


def check_elevation(y, like: np.ndarray | None = None) -> np.ndarray:
    """Coerce one elevation map to finite float64 (H, W), matching ``like``."""
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected an (H, W) elevation map, got shape {arr.shape}")
    if like is not None and arr.shape != like.shape[:2]:
        raise ValueError(f"elevation shape {arr.shape} does not match image "
                         f"{like.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("elevation contains non-finite values")
    return arr


def check_elevation_batch(y, images: list[np.ndarray]) -> list[np.ndarray]:
    arr = np.asarray(y, dtype=np.float64) if not isinstance(y, (list, tuple)) else y
    if isinstance(arr, np.ndarray) and arr.ndim == 2:
        maps = [arr]
    else:
        maps = list(arr)
    if len(maps) != len(images):
        raise ValueError(f"got {len(images)} images but {len(maps)} targets")
    return [check_elevation(m, like=img) for m, img in zip(maps, images)]


def check_binary_mask(m, like: np.ndarray | None = None) -> np.ndarray:
    arr = np.asarray(m)
    if like is not None and arr.shape != like.shape[:2]:
        raise ValueError("mask shape does not match the raster")
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"mask must be strictly binary, found values {vals[:5]}")
    return arr.astype(np.uint8)
