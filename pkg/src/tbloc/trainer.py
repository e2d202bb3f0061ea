"""Two-phase training, Adam, and checkpoint storage.

Each epoch runs two phases. Phase 1 optimizes the detector (backbone,
pyramid, subnets) on TB studies only, since healthy studies contribute no
positive anchors. Phase 2 then optimizes the study head alone on the whole
set, everything else frozen. Record order is reshuffled deterministically
from (seed, epoch), so a run is a pure function of its configuration.

Checkpoints are a JSON manifest (tensor names, shapes, byte offsets, the
epoch, validation AP, and the model config) next to a raw little-endian
float32 buffer. Validation AP is always computed from the quantized
parameters as stored, so the AP recorded in a checkpoint is exactly what a
later load reproduces.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import engine
from .engine import Tensor
from .errors import IntegrityError, NumericError
from .anchors import AnchorSet, encode_boxes, match_anchors
from .losses import LossConfig, detection_loss, fp_head_ce_loss
from .network import (DetectorModel, ModelConfig, build_model, flatten_predictions,
                      forward_detector, forward_fp_head, forward_pyramid,
                      study_level_index)
from .preprocess import preprocess_record

CHECKPOINT_FORMAT = "tbloc-checkpoint-v1"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: LossConfig = LossConfig()
    pos_thresh: float = 0.5
    neg_thresh: float = 0.4
    # The study head is a small classifier learning against features that
    # drift while the detector trains, so it usually wants a larger step
    # size than the trunk. None means use learning_rate.
    fp_learning_rate: float | None = None
    # Per-study steps whipsaw the head between the two labels, so its
    # updates usually want to average over more studies than the detector's.
    # None means use batch_size.
    fp_batch_size: int | None = None
    # Phase 2 normally freezes everything but the study head; enabling this
    # lets its gradient reach the trunk as well.
    phase2_finetune_trunk: bool = False

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.fp_learning_rate is not None and self.fp_learning_rate <= 0:
            raise ValueError("fp_learning_rate must be positive when set")
        if self.fp_batch_size is not None and self.fp_batch_size < 1:
            raise ValueError("fp_batch_size must be >= 1 when set")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.neg_thresh <= self.pos_thresh <= 1:
            raise ValueError("need 0 <= neg_thresh <= pos_thresh <= 1")
        self.loss.validate()
        return self


def adam_update(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step on plain arrays; returns (value, m, v) updated."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    value = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return value, m, v


class Adam:
    """Adam over a named subset of model parameters."""

    def __init__(self, params, config):
        self.params = dict(params)
        self.lr = config.learning_rate
        self.beta1, self.beta2, self.eps = config.beta1, config.beta2, config.eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            p.data, self.m[name], self.v[name] = adam_update(
                p.data, g, self.m[name], self.v[name], self.t,
                self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class TrainingExample:
    """A record preprocessed once: image tensor data, match, reg targets."""

    id: str
    label: str
    image: np.ndarray  # (1, 1, S, S) float64
    match: object
    reg_targets: np.ndarray  # (num_pos, 4)


def build_examples(records, model_config, train_config=None):
    """Preprocess and match every record once; reused across epochs."""
    train_config = train_config or TrainConfig()
    anchor_set = AnchorSet(model_config.anchor_config())
    examples = []
    for record in records:
        processed = preprocess_record(record, model_config.image_size)
        match = match_anchors(anchor_set, processed.boxes,
                              pos_thresh=train_config.pos_thresh,
                              neg_thresh=train_config.neg_thresh)
        pos = match.positive_indices
        if len(pos):
            targets = encode_boxes(anchor_set.boxes[pos],
                                   processed.boxes[match.gt_index[pos]])
        else:
            targets = np.zeros((0, 4))
        examples.append(TrainingExample(
            id=processed.id, label=processed.label,
            image=processed.pixels[None, None], match=match, reg_targets=targets))
    return examples


def _epoch_order(n, seed, epoch, phase):
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed & 0xFFFFFFFF, epoch, phase])))
    return rng.permutation(n)


@dataclass
class EpochSummary:
    phase1_loss: float | None
    phase2_loss: float | None
    phase1_steps: int
    phase2_steps: int


def train_epoch_two_phase(model, examples, config, epoch, optimizers):
    """One epoch: detector on TB studies, then the study head on everything.

    optimizers is the (detector, fp) pair from make_optimizers; passing the
    same pair across epochs carries the Adam state forward.
    """
    config.validate()
    detector_opt, fp_opt = optimizers
    tb_idx = [i for i, ex in enumerate(examples) if ex.label == "tb"]
    if not tb_idx:
        raise ValueError("phase 1 needs at least one tb study in the training set")

    order = _epoch_order(len(tb_idx), config.seed, epoch, phase=1)
    loss_sum, steps = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        batch = [examples[tb_idx[i]] for i in order[start:start + config.batch_size]]
        detector_opt.zero_grad()
        for ex in batch:
            preds = forward_detector(model, Tensor(ex.image), with_fp_head=False)
            cls_flat, reg_flat = flatten_predictions(preds, model.config.num_classes)
            total, breakdown = detection_loss(cls_flat, reg_flat, ex.match,
                                              ex.reg_targets, config.loss)
            (total * (1.0 / len(batch))).backward()
            loss_sum += breakdown.total
            steps += 1
        detector_opt.step()
    phase1 = loss_sum / steps if steps else None

    phase2, p2_steps = None, 0
    if model.config.fp_head:
        order = _epoch_order(len(examples), config.seed, epoch, phase=2)
        loss_sum = 0.0
        fp_batch = config.fp_batch_size or config.batch_size
        for start in range(0, len(order), fp_batch):
            batch = [examples[i] for i in order[start:start + fp_batch]]
            fp_opt.zero_grad()
            level = study_level_index(model.config)
            for ex in batch:
                if config.phase2_finetune_trunk:
                    feature = forward_pyramid(model, Tensor(ex.image))[level]
                else:
                    with engine.no_grad():
                        feature = forward_pyramid(model, Tensor(ex.image))[level]
                logits = forward_fp_head(model, feature)
                loss = fp_head_ce_loss(logits, ex.label, eps=config.loss.eps)
                (loss * (1.0 / len(batch))).backward()
                loss_sum += loss.data.item()
                p2_steps += 1
            fp_opt.step()
        phase2 = loss_sum / p2_steps if p2_steps else None

    return EpochSummary(phase1_loss=phase1, phase2_loss=phase2,
                        phase1_steps=steps, phase2_steps=p2_steps)


def make_optimizers(model, config):
    """(detector, fp) Adam pair honoring the phase-2 freeze setting."""
    detector = Adam({n: model.params[n] for n in model.detector_param_names()}, config)
    fp_names = model.fp_param_names()
    if config.phase2_finetune_trunk:
        fp_names = fp_names + model.detector_param_names()
    fp_config = config
    if config.fp_learning_rate is not None:
        fp_config = replace(config, learning_rate=config.fp_learning_rate)
    fp = Adam({n: model.params[n] for n in fp_names}, fp_config)
    return detector, fp


# -- checkpoints --


@dataclass
class Checkpoint:
    params: dict  # name -> float32 ndarray
    config: dict  # {"model": {...}, "train": {...}}
    epoch: int
    val_ap: float | None = None


def make_checkpoint(model, epoch, val_ap=None, train_config=None):
    params = {n: p.data.astype(np.float32) for n, p in model.params.items()}
    config = {"model": model.config.to_dict()}
    if train_config is not None:
        cfg = {k: v for k, v in train_config.__dict__.items() if k != "loss"}
        cfg["loss"] = train_config.loss.__dict__.copy()
        config["train"] = cfg
    return Checkpoint(params=params, config=config, epoch=epoch, val_ap=val_ap)


def save_checkpoint(ckpt, path):
    """Write manifest JSON at path and the float32 buffer at path + '.bin'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    chunks = []
    for name, arr in ckpt.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "epoch": ckpt.epoch,
        "val_ap": ckpt.val_ap,
        "config": ckpt.config,
        "total_bytes": offset,
        "tensors": tensors,
    }
    path.write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n",
                    encoding="ascii")
    Path(str(path) + ".bin").write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path):
    """Read a checkpoint pair; verifies the buffer length against the manifest."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="ascii"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: unknown checkpoint format "
                             f"{manifest.get('format')!r}")
    bin_path = Path(str(path) + ".bin")
    try:
        blob = bin_path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint buffer {bin_path}: {exc}") from exc
    expected = manifest["total_bytes"]
    if len(blob) != expected:
        raise IntegrityError(
            f"{bin_path}: buffer is {len(blob)} bytes, manifest expects {expected}"
        )
    params = {}
    for spec in manifest["tensors"]:
        start, nbytes = spec["offset"], spec["nbytes"]
        shape = tuple(spec["shape"])
        if start + nbytes > len(blob) or nbytes != 4 * int(np.prod(shape)):
            raise IntegrityError(f"{path}: tensor {spec['name']!r} does not fit "
                                 "its declared extent")
        params[spec["name"]] = np.frombuffer(
            blob, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
    return Checkpoint(params=params, config=manifest["config"],
                      epoch=manifest["epoch"], val_ap=manifest["val_ap"])


def apply_checkpoint(model, ckpt):
    """Load checkpoint parameters into an existing model, strict on names/shapes."""
    missing = set(model.params) - set(ckpt.params)
    unexpected = set(ckpt.params) - set(model.params)
    if missing or unexpected:
        raise IntegrityError(
            f"checkpoint/model parameter mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(unexpected)}"
        )
    for name, arr in ckpt.params.items():
        p = model.params[name]
        if tuple(arr.shape) != p.data.shape:
            raise IntegrityError(
                f"parameter {name!r}: checkpoint shape {tuple(arr.shape)} vs "
                f"model shape {p.data.shape}"
            )
        p.data = arr.astype(np.float64)
    return model


def model_from_checkpoint(ckpt):
    config = ModelConfig.from_dict(ckpt.config["model"])
    model = DetectorModel(config)
    for name, arr in ckpt.params.items():
        model.add_param(name, arr.astype(np.float64))
    return model


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)  # (epoch, p1, p2, val_ap)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "phase1_loss", "phase2_loss", "val_ap"])
            for epoch, p1, p2, ap in self.epochs:
                writer.writerow([epoch,
                                 "" if p1 is None else repr(p1),
                                 "" if p2 is None else repr(p2),
                                 "" if ap is None else repr(ap)])


def run_training(train_records, val_records, model_config, train_config,
                 out_dir, eval_config=None, eval_fn=None, progress=None):
    """Train, checkpoint every epoch, select the best by validation AP.

    eval_fn(checkpoint, val_records) -> AP may be injected; the default
    evaluates the quantized checkpoint with the standard evaluator. progress,
    if given, is called as progress(epoch, summary, val_ap) after each epoch.
    Returns (best Checkpoint, TrainingHistory). Ties in AP go to the earliest
    epoch.
    """
    from .evaluation import EvalConfig, evaluate  # local import, avoids a cycle

    train_config.validate()
    model_config.validate()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    eval_config = eval_config or EvalConfig()

    if eval_fn is None:
        def eval_fn(ckpt, records):
            report = evaluate(ckpt, records, eval_config)
            return report.ap

    model = build_model(model_config, seed=train_config.seed)
    examples = build_examples(train_records, model_config, train_config)
    optimizers = make_optimizers(model, train_config)

    history = TrainingHistory()
    best = None
    best_ap = -math.inf
    best_path = None
    for epoch in range(1, train_config.epochs + 1):
        summary = train_epoch_two_phase(model, examples, train_config, epoch,
                                        optimizers)
        ckpt = make_checkpoint(model, epoch, train_config=train_config)
        ap = eval_fn(ckpt, val_records)
        ckpt.val_ap = ap
        path = save_checkpoint(ckpt, ckpt_dir / f"epoch_{epoch:03d}.ckpt")
        history.epochs.append((epoch, summary.phase1_loss, summary.phase2_loss, ap))
        if progress is not None:
            progress(epoch, summary, ap)
        score = -math.inf if ap is None else ap
        if score > best_ap:
            best_ap, best, best_path = score, ckpt, path
    history.write_csv(out_dir / "training_log.csv")
    if best_path is not None:
        (out_dir / "best.ckpt").write_bytes(best_path.read_bytes())
        (out_dir / "best.ckpt.bin").write_bytes(
            Path(str(best_path) + ".bin").read_bytes())
    return best, history
