"""Dataset records, 16-bit PGM storage, JSON-lines manifests, and the
synthetic radiograph generator used for desk-scale runs.

A manifest is one JSON object per line:

    {"id": "t0001", "image": "images/t0001.pgm", "ww": 4096, "wl": 2048,
     "label": "tb", "boxes": [[x1, y1, x2, y2], ...]}

Image paths are relative to the manifest's directory. Boxes are integer
pixel coordinates, origin top-left, x rightward, y downward, with the
right/bottom edge exclusive, so x2 - x1 is the width in pixels.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ManifestError
from .validation import check_boxes, check_label, check_pixels, check_positive

MANIFEST_FIELDS = ("id", "image", "ww", "wl", "label", "boxes")


@dataclass
class ImageRecord:
    """One study: pixel source, window settings, label, and lesion boxes."""

    id: str
    image: str  # path as written in the manifest
    ww: float
    wl: float
    label: str
    boxes: np.ndarray  # (n, 4) int64, empty for healthy studies
    root: Path | None = None  # directory image paths are relative to
    _pixels: np.ndarray | None = field(default=None, repr=False)
    extra: dict = field(default_factory=dict)

    def validate(self):
        check_label(self.label)
        check_positive(self.ww, "ww")
        boxes = np.asarray(self.boxes, dtype=np.int64).reshape(-1, 4)
        if self.label == "healthy" and len(boxes) > 0:
            raise ValueError(f"record {self.id!r}: healthy studies must have no boxes")
        if len(boxes) > 0:
            if not ((boxes[:, 2] > boxes[:, 0]).all() and (boxes[:, 3] > boxes[:, 1]).all()):
                raise ValueError(f"record {self.id!r}: boxes must satisfy x1 < x2 and y1 < y2")
            if (boxes < 0).any():
                raise ValueError(f"record {self.id!r}: box corners must be non-negative")
        self.boxes = boxes
        if self._pixels is not None:
            self._pixels = check_pixels(self._pixels, context=f"record {self.id!r}")
            h, w = self._pixels.shape
            if len(boxes) > 0 and ((boxes[:, 2] > w).any() or (boxes[:, 3] > h).any()):
                raise ValueError(f"record {self.id!r}: boxes fall outside the image")
        return self

    @property
    def image_path(self) -> Path:
        p = Path(self.image)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    @property
    def pixels(self) -> np.ndarray:
        if self._pixels is None:
            self._pixels = read_pgm16(self.image_path)
        return self._pixels


def write_pgm16(path, pixels):
    """Write a 2-D uint16 matrix as a binary P5 PGM, maxval 65535, big-endian."""
    arr = check_pixels(pixels)
    h, w = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(arr.astype(">u2").tobytes())


def read_pgm16(path):
    """Read a binary P5 PGM with maxval 65535 into a uint16 matrix."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read image {path}: {exc}") from exc
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise IntegrityError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(m.group(i)) for i in (1, 2, 3))
    if maxval != 65535:
        raise IntegrityError(f"{path}: expected maxval 65535, got {maxval}")
    data = blob[m.end():]
    expected = w * h * 2
    if len(data) != expected:
        raise IntegrityError(
            f"{path}: pixel payload is {len(data)} bytes, expected {expected}"
        )
    return np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.uint16)


def write_pgm8(path, pixels):
    """Write a 2-D uint8 matrix as a binary P5 PGM, maxval 255."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ValueError(f"8-bit PGM output requires uint8 pixels, got {arr.dtype}")
    h, w = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def record_to_json(record) -> dict:
    obj = {
        "id": record.id,
        "image": record.image,
        "ww": record.ww,
        "wl": record.wl,
        "label": record.label,
        "boxes": [[int(v) for v in box] for box in np.asarray(record.boxes).reshape(-1, 4)],
    }
    obj.update(record.extra)
    return obj


def write_manifest(records, path):
    """Write records as JSON lines; unknown extra fields are preserved."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record)) + "\n")


def _parse_record(obj, line_no, strict):
    if not isinstance(obj, dict):
        raise ManifestError("manifest line is not a JSON object", line=line_no)
    missing = [k for k in MANIFEST_FIELDS if k not in obj]
    if missing:
        raise ManifestError(f"missing fields {missing}", line=line_no,
                            record_id=obj.get("id"))
    unknown = sorted(k for k in obj if k not in MANIFEST_FIELDS)
    if unknown and strict:
        raise ManifestError(f"unknown fields {unknown}", line=line_no,
                            record_id=obj.get("id"))
    record = ImageRecord(
        id=str(obj["id"]),
        image=str(obj["image"]),
        ww=float(obj["ww"]),
        wl=float(obj["wl"]),
        label=obj["label"],
        boxes=np.asarray(obj["boxes"], dtype=np.int64).reshape(-1, 4)
        if obj["boxes"] else np.zeros((0, 4), dtype=np.int64),
        extra={k: obj[k] for k in obj if k not in MANIFEST_FIELDS},
    )
    try:
        record.validate()
    except ValueError as exc:
        raise ManifestError(str(exc), line=line_no, record_id=record.id) from exc
    return record


def read_manifest(path, strict=False, verify_images=True):
    """Read a JSON-lines manifest into validated ImageRecords.

    Malformed lines raise ManifestError with the 1-based line number.
    When verify_images is set, a referenced PGM that does not exist raises
    IntegrityError naming the missing path.
    """
    path = Path(path)
    root = path.parent
    records = []
    ids = set()
    with open(path, "r", encoding="ascii") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            record = _parse_record(obj, line_no, strict)
            record.root = root
            if record.id in ids:
                raise ManifestError("duplicate record id", line=line_no,
                                    record_id=record.id)
            ids.add(record.id)
            records.append(record)
    if verify_images:
        for record in records:
            if not record.image_path.is_file():
                raise IntegrityError(
                    f"manifest {path} references missing image {record.image_path}"
                )
    return records


# -- synthetic data --

LESION_KINDS = ("dot", "blob", "diffuse")


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic radiograph generator."""

    n_tb: int = 8
    n_healthy: int = 8
    image_size: int = 256
    seed: int = 0
    mix_dot: float = 1.0
    mix_blob: float = 1.0
    mix_diffuse: float = 1.0

    def validate(self):
        if self.n_tb < 0 or self.n_healthy < 0 or self.n_tb + self.n_healthy < 1:
            raise ValueError("need at least one record")
        if self.image_size < 64:
            raise ValueError(f"image_size must be >= 64, got {self.image_size}")
        weights = (self.mix_dot, self.mix_blob, self.mix_diffuse)
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ValueError("lesion mix weights must be non-negative and sum > 0")
        return self


WINDOW_WIDTH = 4096
WINDOW_LEVEL = 2048
MAX_INTENSITY = 4095


def _smooth_noise(rng, size, cells, amplitude):
    """Low-frequency field: coarse noise upsampled bilinearly to size x size."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells))
    pos = np.linspace(0, cells - 1, size)
    i0 = np.clip(pos.astype(np.int64), 0, cells - 2)
    frac = pos - i0
    rows = (coarse[i0, :] * (1 - frac)[:, None] + coarse[i0 + 1, :] * frac[:, None])
    cols = (rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :])
    return cols * amplitude


def _lung_masks(size):
    """Two elliptical lung fields; returns (left, right) boolean masks."""
    yy, xx = np.mgrid[0:size, 0:size]
    masks = []
    for cx_frac in (0.32, 0.68):
        cx, cy = cx_frac * size, 0.50 * size
        a, b = 0.15 * size, 0.28 * size
        masks.append(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0)
    return masks


def _support_box(mask):
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _place_dot(rng, size, lung_box):
    side = int(rng.integers(3, 9))  # bounding box side in [3, 8]
    return _place_ellipse(rng, size, lung_box, side, side, peak=float(rng.uniform(900, 1400)))


def _place_blob(rng, size, lung_box):
    x1, y1, x2, y2 = lung_box
    cap = max(8, min(60, x2 - x1, y2 - y1, size // 2))
    lo = min(20, cap)
    sx = int(rng.integers(lo, cap + 1))
    sy = int(rng.integers(lo, cap + 1))
    return _place_ellipse(rng, size, lung_box, sx, sy, peak=float(rng.uniform(500, 900)))


def _place_ellipse(rng, size, lung_box, span_x, span_y, peak):
    """Additive elliptical lesion whose pixel support spans exactly
    span_x by span_y pixels, kept inside the image with a 1px margin."""
    x1, y1, x2, y2 = lung_box
    # Center on the integer/half-integer grid that realizes the exact span.
    cx_lo = max(1 + (span_x - 1) / 2, x1)
    cx_hi = min(size - 2 - (span_x - 1) / 2, x2 - 1)
    cy_lo = max(1 + (span_y - 1) / 2, y1)
    cy_hi = min(size - 2 - (span_y - 1) / 2, y2 - 1)
    if math.ceil(cx_lo) > math.floor(cx_hi) or math.ceil(cy_lo) > math.floor(cy_hi):
        return None
    half_x = (span_x - 1) / 2
    half_y = (span_y - 1) / 2
    cx = int(rng.integers(math.ceil(cx_lo), math.floor(cx_hi) + 1)) + (0.5 if span_x % 2 == 0 else 0.0)
    cy = int(rng.integers(math.ceil(cy_lo), math.floor(cy_hi) + 1)) + (0.5 if span_y % 2 == 0 else 0.0)
    yy, xx = np.mgrid[0:size, 0:size]
    # Normalized radius slightly over 1 at the span ends keeps them inside.
    r2 = ((xx - cx) / (half_x + 0.25)) ** 2 + ((yy - cy) / (half_y + 0.25)) ** 2
    support = r2 <= 1.0
    bump = peak * np.maximum(0.3, 1.0 - r2) * support
    return bump, support


def _place_diffuse(rng, size, lung_mask):
    """Haze over at least 30% of one lung field."""
    ys = np.nonzero(lung_mask.any(axis=1))[0]
    y_top, y_bot = ys.min(), ys.max()
    frac = float(rng.uniform(0.35, 0.8))
    split = int(y_top + (1 - frac) * (y_bot - y_top + 1))
    band = np.zeros_like(lung_mask)
    band[split:, :] = True
    region = lung_mask & band
    if region.sum() < 0.3 * lung_mask.sum():
        region = lung_mask.copy()
    peak = float(rng.uniform(300, 500))
    return np.where(region, peak, 0.0), region


def _synth_background(rng, size):
    img = 2600.0 + _smooth_noise(rng, size, cells=5, amplitude=300.0)
    left, right = _lung_masks(size)
    img = img - 1200.0 * (left | right)
    img = img + rng.normal(0.0, 40.0, size=(size, size))
    return img, (left, right)


def _synth_record(rng, rec_id, label, config):
    size = config.image_size
    img, lungs = _synth_background(rng, size)
    boxes = []
    if label == "tb":
        weights = np.array([config.mix_dot, config.mix_blob, config.mix_diffuse])
        probs = weights / weights.sum()
        n_lesions = int(rng.integers(1, 5))
        for _ in range(n_lesions):
            kind = LESION_KINDS[int(rng.choice(3, p=probs))]
            lung = lungs[int(rng.integers(0, 2))]
            lung_box = _support_box(lung)
            if kind == "dot":
                placed = _place_dot(rng, size, lung_box)
            elif kind == "blob":
                placed = _place_blob(rng, size, lung_box)
            else:
                placed = _place_diffuse(rng, size, lung)
            if placed is None:
                continue
            bump, support = placed
            img = img + bump
            boxes.append(_support_box(support))
        if not boxes:  # every placement was rejected; a dot always fits
            bump, support = _place_dot(rng, size, _support_box(lungs[0]))
            img = img + bump
            boxes.append(_support_box(support))
    pixels = np.clip(np.floor(img + 0.5), 0, MAX_INTENSITY).astype(np.uint16)
    record = ImageRecord(
        id=rec_id,
        image=f"images/{rec_id}.pgm",
        ww=WINDOW_WIDTH,
        wl=WINDOW_LEVEL,
        label=label,
        boxes=np.asarray(boxes, dtype=np.int64).reshape(-1, 4),
        _pixels=pixels,
    )
    return record.validate()


def generate_dataset(config, out_dir):
    """Generate synthetic studies; writes PGMs plus manifest.jsonl.

    Deterministic: the same config produces byte-identical outputs.
    Returns the list of records (with pixels loaded).
    """
    config.validate()
    out_dir = Path(out_dir)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    records = []
    for i in range(config.n_tb):
        records.append(_synth_record(rng, f"t{i + 1:04d}", "tb", config))
    for i in range(config.n_healthy):
        records.append(_synth_record(rng, f"h{i + 1:04d}", "healthy", config))
    for record in records:
        write_pgm16(out_dir / record.image, record.pixels)
        record.root = out_dir
    write_manifest(records, out_dir / "manifest.jsonl")
    return records
