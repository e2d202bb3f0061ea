"""Anchor grids, IoU, ground-truth matching, and box delta coding.

Anchors live on five pyramid levels. Per cell there is one anchor per
(ratio, scale) pair, ratio-major, and cells are row-major within a level;
levels are concatenated coarsest-stride-last. Anchor boxes are centred on
((j + 0.5) * stride, (i + 0.5) * stride) and are not clipped to the image.

The base sizes default to half the customary one-per-level sizes (stride 8
gets base 16 rather than 32, and so on), which is what lets small lesions
still reach a matchable IoU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_STRIDES = (8, 16, 32, 64, 128)
DEFAULT_BASE_SIZES = (16, 32, 64, 128, 256)
DEFAULT_SCALES = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
DEFAULT_RATIOS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class AnchorConfig:
    image_size: int = 256
    strides: tuple[int, ...] = DEFAULT_STRIDES
    base_sizes: tuple[int, ...] = DEFAULT_BASE_SIZES
    scales: tuple[float, ...] = DEFAULT_SCALES
    ratios: tuple[float, ...] = DEFAULT_RATIOS

    def validate(self):
        if len(self.strides) != len(self.base_sizes):
            raise ValueError("strides and base_sizes must have equal length")
        if list(self.strides) != sorted(set(self.strides)):
            raise ValueError("strides must be strictly increasing")
        if any(s < 1 for s in self.strides):
            raise ValueError("strides must be positive")
        if self.image_size % max(self.strides) != 0:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by the largest "
                f"stride {max(self.strides)}"
            )
        if any(b <= 0 for b in self.base_sizes):
            raise ValueError("base sizes must be positive")
        if not self.scales or not self.ratios:
            raise ValueError("need at least one scale and one ratio")
        if any(r <= 0 for r in self.ratios) or any(s <= 0 for s in self.scales):
            raise ValueError("scales and ratios must be positive")
        return self

    @property
    def anchors_per_cell(self):
        return len(self.ratios) * len(self.scales)


class AnchorSet:
    """All anchors for one image size, flattened in canonical order."""

    def __init__(self, config):
        config.validate()
        self.config = config
        boxes = []
        level_sizes = []
        for stride, base in zip(config.strides, config.base_sizes):
            grid = config.image_size // stride
            level_sizes.append(grid)
            shapes = []
            for ratio in config.ratios:
                for scale in config.scales:
                    w = base * scale * math.sqrt(ratio)
                    h = base * scale / math.sqrt(ratio)
                    shapes.append((w, h))
            shapes = np.asarray(shapes)  # (A, 2)
            cy, cx = np.mgrid[0:grid, 0:grid]
            centers = np.stack([(cx + 0.5) * stride, (cy + 0.5) * stride],
                               axis=-1).reshape(-1, 1, 2)  # (cells, 1, 2)
            half = shapes.reshape(1, -1, 2) / 2.0
            lo = centers - half
            hi = centers + half
            boxes.append(np.concatenate([lo, hi], axis=-1).reshape(-1, 4))
        self.boxes = np.concatenate(boxes, axis=0)
        self.level_sizes = tuple(level_sizes)

    def __len__(self):
        return len(self.boxes)

    @property
    def widths(self):
        return self.boxes[:, 2] - self.boxes[:, 0]

    @property
    def heights(self):
        return self.boxes[:, 3] - self.boxes[:, 1]

    @property
    def centers(self):
        return (self.boxes[:, :2] + self.boxes[:, 2:]) / 2.0


def generate_anchors(image_size, strides=DEFAULT_STRIDES, base_sizes=DEFAULT_BASE_SIZES,
                     scales=DEFAULT_SCALES, ratios=DEFAULT_RATIOS):
    """Build the AnchorSet for an image size; see module docstring for order."""
    return AnchorSet(AnchorConfig(image_size=image_size, strides=tuple(strides),
                                  base_sizes=tuple(base_sizes), scales=tuple(scales),
                                  ratios=tuple(ratios)))


def iou_matrix(boxes_a, boxes_b):
    """Pairwise intersection-over-union: (n, 4) x (m, 4) -> (n, m)."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(box_a, box_b):
    """IoU of two single boxes."""
    return float(iou_matrix([box_a], [box_b])[0, 0])


@dataclass
class MatchResult:
    """Per-anchor match labels: 1 positive, 0 negative, -1 ignored.

    gt_index holds the matched ground-truth row for positives, -1 elsewhere.
    """

    labels: np.ndarray
    gt_index: np.ndarray

    @property
    def positive_indices(self):
        return np.nonzero(self.labels == 1)[0]

    @property
    def negative_indices(self):
        return np.nonzero(self.labels == 0)[0]

    @property
    def num_positive(self):
        return int((self.labels == 1).sum())


def match_anchors(anchors, gt_boxes, pos_thresh=0.5, neg_thresh=0.4, force_match=True):
    """Assign anchors to ground truths by IoU.

    An anchor is positive when its best IoU >= pos_thresh, negative when
    < neg_thresh, ignored in between. With force_match, each ground truth's
    best-IoU anchor is positive regardless (ties go to the lowest anchor
    index; if two ground truths share a best anchor the later one keeps it).
    """
    if not neg_thresh <= pos_thresh:
        raise ValueError("neg_thresh must not exceed pos_thresh")
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    boxes = boxes.reshape(-1, 4)
    n = len(boxes)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(n, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0:
        return MatchResult(labels=labels, gt_index=gt_index)
    m = iou_matrix(boxes, gt)
    best_gt = m.argmax(axis=1)
    best_iou = m[np.arange(n), best_gt]
    labels[(best_iou >= neg_thresh) & (best_iou < pos_thresh)] = -1
    positive = best_iou >= pos_thresh
    labels[positive] = 1
    gt_index[positive] = best_gt[positive]
    if force_match:
        for g in range(len(gt)):
            a = int(m[:, g].argmax())
            labels[a] = 1
            gt_index[a] = g
    return MatchResult(labels=labels, gt_index=gt_index)


LOG_SIZE_CLAMP = math.log(1000.0)


def encode_boxes(anchor_boxes, gt_boxes):
    """Encode ground truths against anchors: (dx/aw, dy/ah, ln(gw/aw), ln(gh/ah))."""
    a = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if a.shape != g.shape:
        raise ValueError(f"shape mismatch: anchors {a.shape} vs ground truths {g.shape}")
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if (aw <= 0).any() or (ah <= 0).any():
        raise ValueError("anchors must have positive extent")
    gw = g[:, 2] - g[:, 0]
    gh = g[:, 3] - g[:, 1]
    if (gw <= 0).any() or (gh <= 0).any():
        raise ValueError("ground-truth boxes must have positive extent")
    acx = (a[:, 0] + a[:, 2]) / 2.0
    acy = (a[:, 1] + a[:, 3]) / 2.0
    gcx = (g[:, 0] + g[:, 2]) / 2.0
    gcy = (g[:, 1] + g[:, 3]) / 2.0
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah,
                     np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchor_boxes, deltas, image_size):
    """Invert encode_boxes and clip to [0, image_size].

    Size deltas are clamped at ln(1000) before exponentiation so a wild
    regression output cannot overflow.
    """
    a = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if a.shape != d.shape:
        raise ValueError(f"shape mismatch: anchors {a.shape} vs deltas {d.shape}")
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    acx = (a[:, 0] + a[:, 2]) / 2.0
    acy = (a[:, 1] + a[:, 3]) / 2.0
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], LOG_SIZE_CLAMP))
    h = ah * np.exp(np.minimum(d[:, 3], LOG_SIZE_CLAMP))
    boxes = np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)
    return np.clip(boxes, 0.0, float(image_size))
