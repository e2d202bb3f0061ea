"""The detector network: plain conv backbone, feature pyramid, shared
classification/regression subnets, and the study-level head that vetoes
detections on images it calls healthy.

Two departures from the stock one-stage template:

* the final regression layer is split per anchor ratio, with the kernel
  shaped to the anchor it serves: 3x1 (rows x cols) for tall ratio-0.5
  anchors, 3x3 for square, 1x3 for wide ratio-2 anchors;
* a small VGG-style head on the deepest pyramid level classifies the whole
  study as healthy/tb, and a healthy verdict empties the detection list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import engine
from .engine import Tensor
from .anchors import (AnchorConfig, DEFAULT_BASE_SIZES, DEFAULT_RATIOS,
                      DEFAULT_SCALES, DEFAULT_STRIDES, decode_boxes)

BACKBONE_STRIDES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 256
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    fpn_channels: int = 64
    head_depth: int = 4
    num_classes: int = 1
    strides: tuple[int, ...] = DEFAULT_STRIDES
    base_sizes: tuple[int, ...] = DEFAULT_BASE_SIZES
    scales: tuple[float, ...] = DEFAULT_SCALES
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    oriented_heads: bool = True
    fp_head: bool = True
    fp_channels: int | None = None
    prior: float = 0.01

    def validate(self):
        if len(self.backbone_widths) != 5 or any(w < 1 for w in self.backbone_widths):
            raise ValueError("backbone_widths must be five positive stage widths")
        if self.fpn_channels < 1:
            raise ValueError("fpn_channels must be positive")
        if self.head_depth < 0:
            raise ValueError("head_depth must be non-negative")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0.0 < self.prior < 1.0:
            raise ValueError("prior must be in (0, 1)")
        if self.fp_channels is not None and self.fp_channels < 1:
            raise ValueError("fp_channels must be positive")
        self.anchor_config().validate()
        prev = None
        for s in self.strides:
            if s <= 32 and s not in BACKBONE_STRIDES:
                raise ValueError(f"stride {s} has no backbone feature")
            if s > 32 and prev is not None and s != prev * 2:
                raise ValueError("extra pyramid strides must double the previous one")
            prev = s
        return self

    def anchor_config(self):
        return AnchorConfig(image_size=self.image_size, strides=self.strides,
                            base_sizes=self.base_sizes, scales=self.scales,
                            ratios=self.ratios)

    @property
    def anchors_per_cell(self):
        return len(self.ratios) * len(self.scales)

    @property
    def fp_width(self):
        return self.fp_channels if self.fp_channels is not None else self.fpn_channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        for key in ("backbone_widths", "strides", "base_sizes", "scales", "ratios"):
            if key in obj and obj[key] is not None:
                obj[key] = tuple(obj[key])
        return cls(**obj).validate()


class DetectorModel:
    """Parameter store plus config; forward passes are free functions."""

    def __init__(self, config):
        self.config = config.validate()
        self.params: dict[str, Tensor] = {}

    def add_param(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def fp_param_names(self):
        return [n for n in self.params if n.startswith("fp_head.")]

    def detector_param_names(self):
        return [n for n in self.params if not n.startswith("fp_head.")]

    def param_digests(self, names=None):
        """sha256 of each parameter's float64 bytes, for freeze checks."""
        import hashlib

        names = list(self.params) if names is None else names
        return {n: hashlib.sha256(self.params[n].data.tobytes()).hexdigest()
                for n in names}


def _init_conv(model, rng, name, c_out, c_in, kh, kw, bias_value=0.0, std=None):
    # Trunk layers scale with fan-in so activations keep their magnitude
    # through the depth; there is no pretrained start to lean on. The final
    # prediction layers instead use a fixed small std, which keeps initial
    # scores pinned near the prior and initial box deltas near zero.
    if std is None:
        std = math.sqrt(2.0 / (c_in * kh * kw))
    w = rng.normal(0.0, std, size=(c_out, c_in, kh, kw))
    model.add_param(f"{name}.weight", w)
    model.add_param(f"{name}.bias", np.full(c_out, bias_value))


OUTPUT_LAYER_STD = 0.01


def build_model(config, seed=0):
    """Create a model with freshly initialized parameters.

    Trunk weights are fan-in scaled normals with zero biases; the
    classification and regression output convs are N(0, 0.01^2), and the
    classification output bias is set so that sigmoid(bias) equals
    config.prior. Parameter creation order is fixed, so a seed fully
    determines the model.
    """
    config = config.validate()
    model = DetectorModel(config)
    rng = np.random.Generator(np.random.PCG64(seed))
    c = config.fpn_channels
    a = config.anchors_per_cell
    k = config.num_classes
    n_scales = len(config.scales)

    c_in = 1
    for i, width in enumerate(config.backbone_widths, start=1):
        _init_conv(model, rng, f"backbone.s{i}.conv1", width, c_in, 3, 3)
        _init_conv(model, rng, f"backbone.s{i}.conv2", width, width, 3, 3)
        c_in = width

    lateral_strides = [s for s in config.strides if s <= 32]
    for s in lateral_strides:
        width = config.backbone_widths[BACKBONE_STRIDES.index(s)]
        _init_conv(model, rng, f"fpn.lateral.s{s}", c, width, 1, 1)
    for s in lateral_strides:
        _init_conv(model, rng, f"fpn.smooth.s{s}", c, c, 3, 3)
    prev_extra = None
    for s in config.strides:
        if s <= 32:
            continue
        src_width = config.backbone_widths[-1] if prev_extra is None else c
        _init_conv(model, rng, f"fpn.extra.s{s}", c, src_width, 3, 3)
        prev_extra = s

    for d in range(1, config.head_depth + 1):
        _init_conv(model, rng, f"cls_head.conv{d}", c, c, 3, 3)
    cls_bias = math.log(config.prior / (1.0 - config.prior))
    _init_conv(model, rng, "cls_head.out", k * a, c, 3, 3, bias_value=cls_bias,
               std=OUTPUT_LAYER_STD)

    for d in range(1, config.head_depth + 1):
        _init_conv(model, rng, f"reg_head.conv{d}", c, c, 3, 3)
    if config.oriented_heads:
        for r_idx, ratio in enumerate(config.ratios):
            kh, kw = oriented_kernel(ratio)
            _init_conv(model, rng, f"reg_head.out.r{r_idx}", 4 * n_scales, c, kh, kw,
                       std=OUTPUT_LAYER_STD)
    else:
        _init_conv(model, rng, "reg_head.out", 4 * a, c, 3, 3,
                   std=OUTPUT_LAYER_STD)

    if config.fp_head:
        f = config.fp_width
        _init_conv(model, rng, "fp_head.block1.conv1", f, c, 3, 3)
        _init_conv(model, rng, "fp_head.block1.conv2", f, f, 3, 3)
        _init_conv(model, rng, "fp_head.block2.conv1", f, f, 3, 3)
        _init_conv(model, rng, "fp_head.block2.conv2", f, f, 3, 3)
        _init_conv(model, rng, "fp_head.conv3", f, f, 3, 3)
        _init_conv(model, rng, "fp_head.conv4", f, f, 3, 3)
        model.add_param("fp_head.fc.weight",
                        rng.normal(0.0, math.sqrt(2.0 / f), size=(f, 2)))
        model.add_param("fp_head.fc.bias", np.zeros(2))
    return model


def oriented_kernel(ratio):
    """Kernel extent (rows, cols) serving anchors of the given w/h ratio:
    tall anchors get 3x1, square 3x3, wide (dumpy) 1x3."""
    if ratio < 1.0:
        return 3, 1
    if ratio == 1.0:
        return 3, 3
    return 1, 3


def _conv(model, name, x, stride=1):
    return engine.conv2d(x, model[f"{name}.weight"], model[f"{name}.bias"], stride=stride)


def forward_backbone(model, x):
    """Five stages of (stride-2 conv, conv), relu after each; returns
    {stride: feature} for strides 2..32."""
    feats = {}
    h = x
    for i, stride in enumerate(BACKBONE_STRIDES, start=1):
        h = engine.relu(_conv(model, f"backbone.s{i}.conv1", h, stride=2))
        h = engine.relu(_conv(model, f"backbone.s{i}.conv2", h))
        feats[stride] = h
    return feats


def forward_pyramid(model, x):
    """Feature pyramid at the configured strides, each with fpn_channels."""
    config = model.config
    feats = forward_backbone(model, x)
    lateral_strides = [s for s in config.strides if s <= 32]
    merged = {}
    for s in reversed(lateral_strides):
        lat = _conv(model, f"fpn.lateral.s{s}", feats[s])
        above = s * 2
        if above in merged:
            lat = lat + engine.upsample2(merged[above])
        merged[s] = lat
    levels = {s: _conv(model, f"fpn.smooth.s{s}", merged[s]) for s in lateral_strides}
    prev = None
    for s in config.strides:
        if s <= 32:
            continue
        src = feats[32] if prev is None else engine.relu(levels[prev])
        levels[s] = _conv(model, f"fpn.extra.s{s}", src, stride=2)
        prev = s
    return [levels[s] for s in config.strides]


@dataclass
class RawPredictions:
    """Per-level (cls_logits, reg_deltas) tensors plus optional study logits."""

    levels: list  # [(Tensor [1, K*A, H, W], Tensor [1, 4*A, H, W]), ...]
    study_logits: Tensor | None = None


def forward_detector(model, image, with_fp_head=True):
    """Full forward pass over one [1, 1, S, S] image tensor."""
    config = model.config
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.data.ndim == 2:
        image = image.reshape(1, 1, *image.data.shape)
    if image.data.shape[0] != 1 or image.data.shape[1] != 1:
        raise ValueError(f"expected a single one-channel image, got {image.shape}")
    if image.data.shape[2] != config.image_size or image.data.shape[3] != config.image_size:
        raise ValueError(
            f"image extent {image.data.shape[2:]} does not match the configured "
            f"size {config.image_size}"
        )
    pyramid = forward_pyramid(model, image)
    levels = []
    for level in pyramid:
        h = level
        for d in range(1, config.head_depth + 1):
            h = engine.relu(_conv(model, f"cls_head.conv{d}", h))
        cls_out = _conv(model, "cls_head.out", h)
        h = level
        for d in range(1, config.head_depth + 1):
            h = engine.relu(_conv(model, f"reg_head.conv{d}", h))
        if config.oriented_heads:
            parts = [_conv(model, f"reg_head.out.r{r}", h)
                     for r in range(len(config.ratios))]
            reg_out = engine.concat(parts, axis=1)
        else:
            reg_out = _conv(model, "reg_head.out", h)
        levels.append((cls_out, reg_out))
    study = None
    if with_fp_head and config.fp_head:
        study = forward_fp_head(model, pyramid[study_level_index(config)])
    return RawPredictions(levels=levels, study_logits=study)


def study_level_index(config):
    """Pyramid index the study head reads: the deepest level that has a
    lateral connection from the backbone (the top of the top-down pathway),
    not the extra strided levels stacked above it."""
    lateral = [i for i, s in enumerate(config.strides) if s <= BACKBONE_STRIDES[-1]]
    if not lateral:
        raise ValueError("no pyramid level at or below the backbone's deepest stride")
    return lateral[-1]


def forward_fp_head(model, study_level):
    """Study head on its pyramid level (see study_level_index): two
    conv-conv-pool blocks, two 3x3 convs, global average pooling, then a
    dense layer to (healthy, tb) logits of shape (2,)."""
    if not model.config.fp_head:
        raise RuntimeError("this model was built without the study head")
    # Standardize the incoming feature map so the head sees unit-scale
    # input no matter how the trunk's activation scale drifts between
    # epochs. Without this the first conv saturates and its units die.
    # The statistics are treated as constants (no gradient through them),
    # which is exact while the trunk is frozen during study-head training.
    mu = float(study_level.data.mean())
    sigma = float(study_level.data.std())
    x = study_level * (1.0 / (sigma + 1e-6)) + (-mu / (sigma + 1e-6))
    for b in (1, 2):
        x = engine.relu(_conv(model, f"fp_head.block{b}.conv1", x))
        x = engine.relu(_conv(model, f"fp_head.block{b}.conv2", x))
        x = engine.pool2(x)
    x = _conv(model, "fp_head.conv3", x)
    x = _conv(model, "fp_head.conv4", x)
    pooled = engine.global_avg_pool(x)  # [1, F]
    logits = engine.linear(pooled, model["fp_head.fc.weight"], model["fp_head.fc.bias"])
    return logits.reshape(2)


def flatten_predictions(preds, num_classes=1):
    """Concatenate per-level maps into (N_anchors, K) cls and (N_anchors, 4)
    reg tensors in canonical anchor order."""
    cls_parts = []
    reg_parts = []
    for cls_map, reg_map in preds.levels:
        _, ck, h, w = cls_map.data.shape
        a = ck // num_classes
        cls_parts.append(cls_map.permute(0, 2, 3, 1).reshape(h * w * a, num_classes))
        reg_parts.append(reg_map.permute(0, 2, 3, 1).reshape(h * w * a, 4))
    return engine.concat(cls_parts, axis=0), engine.concat(reg_parts, axis=0)


@dataclass
class Detection:
    box: np.ndarray  # (4,) x1, y1, x2, y2
    score: float
    image_id: str | None = None


def nms(boxes, scores, iou_thresh):
    """Greedy NMS: keep highest-scoring boxes, suppress overlaps with
    IoU strictly greater than iou_thresh. Ties keep input order.
    Returns indices into the input arrays, in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        xx1 = np.maximum(x1[i], x1[rest])
        yy1 = np.maximum(y1[i], y1[rest])
        xx2 = np.minimum(x2[i], x2[rest])
        yy2 = np.minimum(y2[i], y2[rest])
        inter = np.clip(xx2 - xx1, 0, None) * np.clip(yy2 - yy1, 0, None)
        union = areas[i] + areas[rest] - inter
        ovr = np.where(union > 0, inter / union, 0.0)
        order = rest[ovr <= iou_thresh]
    return keep


def postprocess(preds, anchor_set, score_thresh=0.05, nms_iou=0.5, top_k=100,
                image_id=None):
    """Turn raw predictions into a ranked detection list.

    Sigmoid scores above score_thresh are decoded against their anchors,
    clipped to the image, degenerate boxes dropped, greedy NMS applied,
    and at most top_k survivors returned sorted by descending score
    (ties by lower anchor index)."""
    with engine.no_grad():
        cls_flat, reg_flat = flatten_predictions(preds)
    scores = engine.sigmoid_values(cls_flat.data[:, 0])
    if len(scores) != len(anchor_set):
        raise ValueError(
            f"{len(scores)} predictions but {len(anchor_set)} anchors; "
            "config mismatch"
        )
    keep = np.nonzero(scores > score_thresh)[0]
    if keep.size == 0:
        return []
    boxes = decode_boxes(anchor_set.boxes[keep], reg_flat.data[keep],
                         anchor_set.config.image_size)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    keep, boxes = keep[valid], boxes[valid]
    if keep.size == 0:
        return []
    kept_scores = scores[keep]
    # keep is ascending anchor index, so stable sort resolves ties by it
    survivors = nms(boxes, kept_scores, nms_iou)[:top_k]
    return [Detection(box=boxes[i], score=float(kept_scores[i]), image_id=image_id)
            for i in survivors]


STUDY_HEALTHY, STUDY_TB = 0, 1


def study_verdict(study_logits):
    """'healthy' or 'tb' from the study head's logits (argmax; a tie reads
    as healthy)."""
    data = study_logits.data if isinstance(study_logits, Tensor) else np.asarray(study_logits)
    return "healthy" if int(np.argmax(data)) == STUDY_HEALTHY else "tb"


def apply_fp_gate(detections, study_logits):
    """Empty the detection list when the study head votes healthy."""
    if study_verdict(study_logits) == "healthy":
        return []
    return list(detections)
