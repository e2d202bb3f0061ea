"""Detection and study-level losses.

The classification term is a focal loss with an additive hard-example
weight:

    term = 0.5 - (p_t - 0.5)^2 - alpha_t * (1 - p_t)^gamma * ln(p_t)

with alpha_t = alpha for positives and (1 - alpha) for negatives, summed
over all non-ignored anchors and divided by max(1, num positives). Note
the additive weight has a floor of 0.25 per anchor as p_t -> 1, so the
total classification loss scales with anchor count; disable it via
use_hard_example_weight to recover the plain focal baseline.

Box regression is smooth-L1 over positive anchors; the total is
cls + reg_weight * reg. The study head uses plain cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import engine
from .engine import Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.40
    gamma: float = 1.0
    reg_weight: float = 0.25
    use_hard_example_weight: bool = True
    eps: float = 1e-7

    def validate(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.reg_weight < 0.0:
            raise ValueError(f"reg_weight must be non-negative, got {self.reg_weight}")
        if not 0.0 < self.eps < 0.5:
            raise ValueError(f"eps must be in (0, 0.5), got {self.eps}")
        return self


def baseline_focal_config(config=None):
    """The ablation baseline: plain focal loss with alpha 0.25, gamma 2."""
    base = config or LossConfig()
    return replace(base, alpha=0.25, gamma=2.0, use_hard_example_weight=False)


def hard_example_cls_term(p, label, config=None):
    """Scalar reference form of the classification term; p is the predicted
    foreground probability, label is 0 or 1."""
    config = config or LossConfig()
    p = min(max(float(p), config.eps), 1.0 - config.eps)
    if label == 1:
        p_t, alpha_t = p, config.alpha
    elif label == 0:
        p_t, alpha_t = 1.0 - p, 1.0 - config.alpha
    else:
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    focal = -alpha_t * (1.0 - p_t) ** config.gamma * math.log(p_t)
    if not config.use_hard_example_weight:
        return focal
    return 0.5 - (p_t - 0.5) ** 2 + focal


def _cls_terms(p_t, alpha_t, config):
    """Tensor form of the classification term; p_t already clamped."""
    focal = (1.0 - p_t) ** config.gamma * p_t.log() * (-alpha_t)
    if not config.use_hard_example_weight:
        return focal
    return 0.5 - (p_t - 0.5) ** 2 + focal


def classification_loss(cls_logits, match, config=None):
    """Classification loss over one image's anchors.

    cls_logits: Tensor of shape (num_anchors,) or (num_anchors, 1).
    Returns a scalar Tensor: sum of terms over non-ignored anchors divided
    by max(1, num positives).
    """
    config = (config or LossConfig()).validate()
    logits = cls_logits
    if logits.data.ndim == 2:
        if logits.data.shape[1] != 1:
            raise ValueError("multi-class logits are not supported")
        logits = logits.reshape(logits.data.shape[0])
    if logits.data.shape != match.labels.shape:
        raise ValueError(
            f"logits shape {logits.data.shape} does not match "
            f"{match.labels.shape} anchor labels"
        )
    p = engine.clamp(engine.sigmoid(logits), config.eps, 1.0 - config.eps)
    pos = match.positive_indices
    neg = match.negative_indices
    total = Tensor(0.0)
    if len(pos):
        total = total + _cls_terms(engine.take(p, pos), config.alpha, config).sum()
    if len(neg):
        p_t = 1.0 - engine.take(p, neg)
        total = total + _cls_terms(p_t, 1.0 - config.alpha, config).sum()
    return total * (1.0 / max(1, match.num_positive))


def regression_loss(reg_deltas, pos_indices, targets):
    """Smooth-L1 between predicted deltas and encoded targets, averaged over
    positive anchors and the 4 coordinates. Zero when there are no positives.

    reg_deltas: Tensor (num_anchors, 4); targets: array (num_pos, 4).
    """
    pos = np.asarray(pos_indices, dtype=np.int64)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    if len(pos) != len(t):
        raise ValueError(f"{len(pos)} positive indices but {len(t)} target rows")
    if len(pos) == 0:
        return Tensor(0.0)
    pred = engine.take(reg_deltas, pos)
    return engine.smooth_l1(pred, t).sum() * (1.0 / (4 * len(pos)))


def total_detection_loss(cls_loss, reg_loss, config=None):
    """Combine per Eq: total = cls + reg_weight * reg (works on Tensors or floats)."""
    config = config or LossConfig()
    return cls_loss + config.reg_weight * reg_loss


@dataclass
class LossBreakdown:
    loss_cls: float
    loss_reg: float
    total: float
    num_positive: int


def detection_loss(cls_logits, reg_deltas, match, targets, config=None):
    """Full detection loss for one image.

    Returns (total Tensor, LossBreakdown); the breakdown's total is the
    identical float64 combination cls + reg_weight * reg.
    """
    config = (config or LossConfig()).validate()
    cls_t = classification_loss(cls_logits, match, config)
    reg_t = regression_loss(reg_deltas, match.positive_indices, targets)
    total_t = total_detection_loss(cls_t, reg_t, config)
    cls_f = cls_t.data.item()
    reg_f = reg_t.data.item()
    breakdown = LossBreakdown(
        loss_cls=cls_f,
        loss_reg=reg_f,
        total=cls_f + config.reg_weight * reg_f,
        num_positive=match.num_positive,
    )
    return total_t, breakdown


STUDY_CLASSES = ("healthy", "tb")  # index 0 gates detections off


def fp_head_ce_loss(study_logits, label, eps=1e-7):
    """Cross-entropy of the study head's 2-class logits.

    label is 'healthy'/'tb' or the class index. The true-class probability
    is clamped at eps, capping the loss at -ln(eps).
    """
    if isinstance(label, str):
        label = STUDY_CLASSES.index(label)
    if label not in (0, 1):
        raise ValueError(f"label must be 0, 1, or a study class name, got {label!r}")
    logits = study_logits
    if logits.data.shape != (2,):
        raise ValueError(f"study logits must have shape (2,), got {logits.data.shape}")
    shift = float(logits.data.max())  # constant; softmax is shift-invariant
    z = logits - shift
    log_norm = z.exp().sum().log()
    p_true = (engine.take(z, [label]).sum() - log_norm).exp()
    return -engine.clamp(p_true, eps, 1.0).log()
