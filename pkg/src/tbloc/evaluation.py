"""Detection evaluation: greedy matching at IoU > 0.3, precision-recall,
uninterpolated average precision, and fROC, plus CSV/JSON/SVG reports.

Matching is one-to-one: detections are taken in descending score order and
claim the unmatched ground truth of highest IoU when that IoU exceeds the
threshold. AP is the literal sum of precision times recall increments over
the threshold sweep, no interpolation, so it can be cross-checked by brute
force enumeration.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .anchors import AnchorSet, iou_matrix
from .network import apply_fp_gate, forward_detector, postprocess, study_verdict
from .preprocess import preprocess_record
from .trainer import Checkpoint, load_checkpoint, model_from_checkpoint


@dataclass(frozen=True)
class EvalConfig:
    iou_thresh: float = 0.3
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    top_k: int = 100
    threads: int = 1

    def validate(self):
        if not 0 <= self.iou_thresh < 1:
            raise ValueError("iou_thresh must be in [0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        return self


def match_detections(detections, gt_boxes, iou_thresh=0.3):
    """Flag each detection TP/FP against one image's ground truths.

    Detections are processed in descending score order; each claims the
    highest-IoU unmatched ground truth if that IoU is strictly greater
    than iou_thresh. Returns a bool array aligned with the input order.
    """
    n = len(detections)
    flags = np.zeros(n, dtype=bool)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if n == 0 or len(gts) == 0:
        return flags
    boxes = np.stack([np.asarray(d.box, dtype=np.float64) for d in detections])
    scores = np.asarray([d.score for d in detections])
    ious = iou_matrix(boxes, gts)
    taken = np.zeros(len(gts), dtype=bool)
    for i in np.argsort(-scores, kind="stable"):
        candidates = np.where(taken, -1.0, ious[i])
        g = int(candidates.argmax())
        if candidates[g] > iou_thresh:
            flags[i] = True
            taken[g] = True
    return flags


def pr_curve(scores, flags, total_gt):
    """Precision-recall points swept over every distinct score, descending.

    Returns a list of (recall, precision). total_gt must be positive.
    """
    if total_gt < 1:
        raise ValueError("pr_curve needs at least one ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if scores.shape != flags.shape:
        raise ValueError("scores and flags must be aligned")
    if scores.size == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    # last index of each distinct-score run, i.e. the cumulative counts
    # once every detection scoring >= that threshold is included
    last = np.nonzero(np.diff(scores, append=-np.inf))[0]
    points = []
    for i in last:
        points.append((tp[i] / total_gt, tp[i] / (tp[i] + fp[i])))
    return points


def average_precision(points):
    """Uninterpolated AP: sum of precision * (recall step) over the sweep."""
    ap = 0.0
    prev_recall = 0.0
    for recall, precision in points:
        if recall < prev_recall - 1e-12:
            raise ValueError("recalls must be nondecreasing")
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    return ap


def froc_curve(scores, flags, image_count, total_gt):
    """fROC points (mean FP per image, sensitivity) over the score sweep."""
    if image_count < 1:
        raise ValueError("froc_curve needs at least one image")
    if total_gt < 1:
        raise ValueError("froc_curve needs at least one ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if scores.size == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    flags = flags[order]
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    last = np.nonzero(np.diff(scores[order], append=-np.inf))[0]
    return [(fp[i] / image_count, tp[i] / total_gt) for i in last]


@dataclass
class ThresholdRow:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float
    avg_fp_per_image: float


@dataclass
class EvalReport:
    ap: float | None
    image_count: int
    gt_count: int
    detection_count: int
    rows: list = field(default_factory=list)
    pr_points: list = field(default_factory=list)
    froc_points: list = field(default_factory=list)
    per_image: dict = field(default_factory=dict)  # id -> (detections, verdict)


def _resolve_model(source):
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    if isinstance(source, Checkpoint):
        return model_from_checkpoint(source)
    return source


def evaluate(source, records, config=None):
    """Evaluate a model/checkpoint over records; returns an EvalReport.

    Detections are matched in processed coordinates (IoU is invariant to
    the axis scaling, so original-coordinate matching would agree). With
    the study head present, its gate is applied before matching. A record
    set with zero ground-truth boxes yields a flagged report: ap is None
    and no threshold rows are produced.
    """
    config = (config or EvalConfig()).validate()
    model = _resolve_model(source)
    anchor_set = AnchorSet(model.config.anchor_config())

    def run_one(record):
        processed = preprocess_record(record, model.config.image_size)
        with engine.no_grad():
            preds = forward_detector(model, processed.pixels[None, None])
        detections = postprocess(preds, anchor_set, config.score_thresh,
                                 config.nms_iou, config.top_k, image_id=record.id)
        verdict = None
        if preds.study_logits is not None:
            verdict = study_verdict(preds.study_logits)
            detections = apply_fp_gate(detections, preds.study_logits)
        flags = match_detections(detections, processed.boxes, config.iou_thresh)
        return processed, detections, verdict, flags

    records = list(records)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run_one, records))
    else:
        results = [run_one(r) for r in records]

    all_scores, all_flags = [], []
    gt_count = 0
    det_count = 0
    per_image = {}
    for processed, detections, verdict, flags in results:
        gt_count += len(processed.boxes)
        det_count += len(detections)
        all_scores.extend(d.score for d in detections)
        all_flags.extend(flags.tolist())
        per_image[processed.id] = (detections, verdict)

    report = EvalReport(ap=None, image_count=len(records), gt_count=gt_count,
                        detection_count=det_count, per_image=per_image)
    if gt_count == 0:
        return report
    scores = np.asarray(all_scores)
    flags = np.asarray(all_flags, dtype=bool)
    report.pr_points = pr_curve(scores, flags, gt_count)
    report.ap = average_precision(report.pr_points)
    report.froc_points = froc_curve(scores, flags, len(records), gt_count)

    if len(scores):
        order = np.argsort(-scores, kind="stable")
        s_sorted, f_sorted = scores[order], flags[order]
        tp = np.cumsum(f_sorted)
        fp = np.cumsum(~f_sorted)
        last = np.nonzero(np.diff(s_sorted, append=-np.inf))[0]
        for i in last:
            n_tp, n_fp = int(tp[i]), int(fp[i])
            precision = n_tp / (n_tp + n_fp) if n_tp + n_fp > 0 else None
            report.rows.append(ThresholdRow(
                threshold=float(s_sorted[i]), tp=n_tp, fp=n_fp,
                fn=gt_count - n_tp, precision=precision,
                recall=n_tp / gt_count,
                avg_fp_per_image=n_fp / len(records)))
    return report


# -- report writers --


def write_report_csv(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["threshold,tp,fp,fn,precision,recall,avg_fp_per_image"]
    for row in report.rows:
        precision = "" if row.precision is None else repr(row.precision)
        lines.append(f"{row.threshold!r},{row.tp},{row.fp},{row.fn},"
                     f"{precision},{row.recall!r},{row.avg_fp_per_image!r}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def write_summary_json(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = {"ap": report.ap, "image_count": report.image_count,
               "gt_count": report.gt_count}
    path.write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="ascii")


def _svg_polyline(points, width, height, margin, x_max, y_max):
    coords = []
    for x, y in points:
        px = margin + (x / x_max if x_max else 0.0) * (width - 2 * margin)
        py = height - margin - (y / y_max if y_max else 0.0) * (height - 2 * margin)
        coords.append(f"{px:.2f},{py:.2f}")
    return " ".join(coords)


def _write_curve_svg(points, path, x_label, y_label, x_max, y_max):
    width, height, margin = 640, 480, 50
    body = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" text-anchor="middle" '
        f'font-size="14">{x_label}</text>',
        f'<text x="16" y="{height // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 16 {height // 2})">{y_label}</text>',
    ]
    if points:
        body.append(f'<polyline fill="none" stroke="steelblue" stroke-width="2" '
                    f'points="{_svg_polyline(points, width, height, margin, x_max, y_max)}"/>')
    body.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(body) + "\n", encoding="ascii")


def write_pr_svg(report, path):
    points = [(r, p) for r, p in report.pr_points]
    _write_curve_svg(points, path, "recall", "precision", x_max=1.0, y_max=1.0)


def write_froc_svg(report, path):
    points = report.froc_points
    x_max = max((x for x, _ in points), default=1.0) or 1.0
    _write_curve_svg(points, path, "mean false positives per image",
                     "sensitivity", x_max=x_max, y_max=1.0)
