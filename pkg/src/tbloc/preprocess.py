"""Radiograph preprocessing: intensity windowing, corner-aligned bilinear
resizing, global histogram equalization, and the record-level pipeline
(window -> resize -> equalize -> scale to [0, 1]).

Rounding is half-up throughout (0.5 rounds to 1), not banker's rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import write_pgm8
from .validation import check_positive


def round_half_up(values):
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def window_map(pixels, ww, wl):
    """Map raw intensities to 8 bits: clamp(round(255 * (p - (wl - ww/2)) / ww)).

    ww must be positive; the window is centred on wl and spans ww units.
    """
    check_positive(ww, "ww")
    p = np.asarray(pixels, dtype=np.float64)
    scaled = 255.0 * (p - (wl - ww / 2.0)) / ww
    return np.clip(round_half_up(scaled), 0, 255).astype(np.uint8)


def resize_bilinear(pixels, out_h, out_w):
    """Corner-aligned bilinear resize to (out_h, out_w); returns float64.

    Output corners sample input corners exactly; a single-row or -column
    output samples index 0.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    src = np.asarray(pixels, dtype=np.float64)
    if src.ndim != 2 or src.size == 0:
        raise ValueError(f"input must be a non-empty 2-D matrix, got shape {src.shape}")
    h, w = src.shape

    def grid(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out), np.zeros(n_out, dtype=np.int64)
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.minimum(pos.astype(np.int64), n_in - 2)
        return pos - i0, i0

    fy, y0 = grid(out_h, h)
    fx, x0 = grid(out_w, w)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def hist_equalize(pixels):
    """Global histogram equalization of an 8-bit image.

    out(v) = round(255 * (cdf(v) - cdf_min) / (1 - cdf_min)) where cdf_min
    is the cdf at the smallest occupied bin. A constant image is returned
    unchanged.
    """
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ValueError(f"hist_equalize expects uint8 input, got {arr.dtype}")
    counts = np.bincount(arr.ravel(), minlength=256)
    cdf = np.cumsum(counts) / arr.size
    cdf_min = cdf[np.nonzero(counts)[0][0]]
    if cdf_min >= 1.0:
        return arr.copy()
    table = np.clip(round_half_up(255.0 * (cdf - cdf_min) / (1.0 - cdf_min)), 0, 255)
    return table.astype(np.uint8)[arr]


@dataclass
class ProcessedImage:
    """A record after the full pipeline: float pixels in [0, 1] plus boxes
    rescaled into processed coordinates."""

    id: str
    label: str
    pixels: np.ndarray  # (target, target) float64 in [0, 1]
    boxes: np.ndarray  # (n, 4) float64, processed coordinates
    scale: tuple[float, float]  # (sx, sy): processed = original * scale


def preprocess_record(record, target_size):
    """Run window -> resize -> equalize -> /255 on one record.

    Boxes are scaled by (target/width, target/height). The resized image is
    re-quantized (round half-up) to 8 bits before equalization.
    """
    if target_size < 1:
        raise ValueError(f"target_size must be positive, got {target_size}")
    raw = record.pixels
    h, w = raw.shape
    windowed = window_map(raw, record.ww, record.wl)
    resized = resize_bilinear(windowed, target_size, target_size)
    quantized = np.clip(round_half_up(resized), 0, 255).astype(np.uint8)
    equalized = hist_equalize(quantized)
    pixels = equalized.astype(np.float64) / 255.0
    sx, sy = target_size / w, target_size / h
    boxes = np.asarray(record.boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0] *= sx
    boxes[:, 2] *= sx
    boxes[:, 1] *= sy
    boxes[:, 3] *= sy
    return ProcessedImage(id=record.id, label=record.label, pixels=pixels,
                          boxes=boxes, scale=(sx, sy))


def dump_processed(processed, path):
    """Debug dump of a processed image as an 8-bit PGM (values * 255)."""
    img = np.clip(round_half_up(processed.pixels * 255.0), 0, 255).astype(np.uint8)
    write_pgm8(path, img)
