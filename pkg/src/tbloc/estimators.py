"""scikit-learn style wrappers around the detector pipeline.

RadiographPreprocessor is a stateless transformer (window, resize,
equalize, scale); LesionDetector wraps training, prediction, and AP
scoring behind the fit/predict/score convention so the pieces compose
with the usual get_params/set_params tooling.
"""

from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import engine
from .anchors import AnchorSet
from .dataio import read_manifest
from .evaluation import EvalConfig, evaluate
from .losses import LossConfig, baseline_focal_config
from .network import (ModelConfig, apply_fp_gate, forward_detector, postprocess,
                      study_verdict)
from .preprocess import preprocess_record
from .trainer import TrainConfig, run_training, model_from_checkpoint


def _as_records(X):
    if isinstance(X, (str, bytes)) or hasattr(X, "read_text"):
        return read_manifest(X)
    return list(X)


class RadiographPreprocessor(BaseEstimator, TransformerMixin):
    """Transform ImageRecords into ProcessedImages at a fixed target size."""

    def __init__(self, target_size=256):
        self.target_size = target_size

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return [preprocess_record(r, self.target_size) for r in _as_records(X)]


class LesionDetector(BaseEstimator):
    """Anchor-based lesion detector with an optional study-level gate.

    fit(X) expects ImageRecords or a manifest path; detection labels ride
    on the records, so y is unused. predict(X) returns one (n, 5) array
    of [x1, y1, x2, y2, score] rows per record, in original image
    coordinates; score(X) is average precision at the configured IoU.
    """

    def __init__(self, image_size=256, epochs=10, learning_rate=1e-4,
                 fp_learning_rate=None, batch_size=1, fp_batch_size=None, seed=0,
                 backbone_widths=(16, 32, 64, 64, 64),
                 fpn_channels=64, head_depth=4, strides=None, base_sizes=None,
                 oriented_heads=True,
                 fp_head=True, baseline_focal_loss=False, iou_thresh=0.3,
                 score_thresh=0.05, nms_iou=0.5, top_k=100, out_dir=None):
        self.image_size = image_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.fp_learning_rate = fp_learning_rate
        self.batch_size = batch_size
        self.fp_batch_size = fp_batch_size
        self.seed = seed
        self.backbone_widths = backbone_widths
        self.fpn_channels = fpn_channels
        self.head_depth = head_depth
        self.strides = strides
        self.base_sizes = base_sizes
        self.oriented_heads = oriented_heads
        self.fp_head = fp_head
        self.baseline_focal_loss = baseline_focal_loss
        self.iou_thresh = iou_thresh
        self.score_thresh = score_thresh
        self.nms_iou = nms_iou
        self.top_k = top_k
        self.out_dir = out_dir

    def _model_config(self):
        extra = {}
        if self.strides is not None:
            extra["strides"] = tuple(self.strides)
        if self.base_sizes is not None:
            extra["base_sizes"] = tuple(self.base_sizes)
        return ModelConfig(image_size=self.image_size,
                           backbone_widths=tuple(self.backbone_widths),
                           fpn_channels=self.fpn_channels,
                           head_depth=self.head_depth,
                           oriented_heads=self.oriented_heads,
                           fp_head=self.fp_head, **extra)

    def _train_config(self):
        loss = LossConfig()
        if self.baseline_focal_loss:
            loss = baseline_focal_config(loss)
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                           fp_learning_rate=self.fp_learning_rate,
                           batch_size=self.batch_size,
                           fp_batch_size=self.fp_batch_size,
                           seed=self.seed, loss=loss)

    def _eval_config(self):
        return EvalConfig(iou_thresh=self.iou_thresh, score_thresh=self.score_thresh,
                          nms_iou=self.nms_iou, top_k=self.top_k)

    def fit(self, X, y=None, validation=None):
        records = _as_records(X)
        val_records = records if validation is None else _as_records(validation)
        out_dir = self.out_dir or tempfile.mkdtemp(prefix="tbloc-fit-")
        best, history = run_training(records, val_records, self._model_config(),
                                     self._train_config(), out_dir,
                                     eval_config=self._eval_config())
        self.checkpoint_ = best
        self.model_ = model_from_checkpoint(best)
        self.history_ = history
        self.best_val_ap_ = best.val_ap
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this LesionDetector instance is not fitted yet")

    def predict(self, X):
        self._require_fitted()
        config = self._eval_config()
        anchor_set = AnchorSet(self.model_.config.anchor_config())
        out = []
        for record in _as_records(X):
            processed = preprocess_record(record, self.model_.config.image_size)
            with engine.no_grad():
                preds = forward_detector(self.model_, processed.pixels[None, None])
            detections = postprocess(preds, anchor_set, config.score_thresh,
                                     config.nms_iou, config.top_k,
                                     image_id=record.id)
            if preds.study_logits is not None:
                detections = apply_fp_gate(detections, preds.study_logits)
            sx, sy = processed.scale
            rows = np.array([[d.box[0] / sx, d.box[1] / sy, d.box[2] / sx,
                              d.box[3] / sy, d.score] for d in detections],
                            dtype=np.float64).reshape(-1, 5)
            out.append(rows)
        return out

    def predict_study(self, X):
        """Study-level healthy/tb verdicts (requires the study head)."""
        self._require_fitted()
        if not self.model_.config.fp_head:
            raise RuntimeError("this model was trained without the study head")
        verdicts = []
        for record in _as_records(X):
            processed = preprocess_record(record, self.model_.config.image_size)
            with engine.no_grad():
                preds = forward_detector(self.model_, processed.pixels[None, None])
            verdicts.append(study_verdict(preds.study_logits))
        return verdicts

    def score(self, X, y=None):
        """Average precision at the configured IoU threshold (None-safe: 0.0
        when the records carry no boxes)."""
        self._require_fitted()
        report = evaluate(self.model_, _as_records(X), self._eval_config())
        return 0.0 if report.ap is None else report.ap
