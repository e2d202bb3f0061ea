"""Input validation helpers shared by the public entry points."""

from __future__ import annotations

import numpy as np

LABELS = ("tb", "healthy")


def check_boxes(boxes, width=None, height=None, context=""):
    """Validate an (n, 4) array of x1, y1, x2, y2 boxes; returns float64 array.

    Requires x1 < x2 and y1 < y2; when width/height are given, corners must
    lie within [0, width] x [0, height].
    """
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    where = f" in {context}" if context else ""
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"boxes{where} must have shape (n, 4), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"boxes{where} contain non-finite values")
    if not ((arr[:, 2] > arr[:, 0]).all() and (arr[:, 3] > arr[:, 1]).all()):
        raise ValueError(f"boxes{where} must satisfy x1 < x2 and y1 < y2")
    if width is not None:
        if (arr[:, 0] < 0).any() or (arr[:, 2] > width).any():
            raise ValueError(f"boxes{where} fall outside [0, {width}] horizontally")
    if height is not None:
        if (arr[:, 1] < 0).any() or (arr[:, 3] > height).any():
            raise ValueError(f"boxes{where} fall outside [0, {height}] vertically")
    return arr


def check_label(label):
    if label not in LABELS:
        raise ValueError(f"label must be one of {LABELS}, got {label!r}")
    return label


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_pixels(pixels, context=""):
    """Validate a 2-D unsigned 16-bit pixel matrix."""
    arr = np.asarray(pixels)
    where = f" in {context}" if context else ""
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"pixels{where} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"pixels{where} must be integer-typed, got {arr.dtype}")
        if arr.min() < 0 or arr.max() > 65535:
            raise ValueError(f"pixels{where} exceed the 16-bit range")
        arr = arr.astype(np.uint16)
    return arr
