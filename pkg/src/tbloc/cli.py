"""Command-line front end for the whole pipeline.

Subcommands: gen-data, preprocess, train, eval, predict, curves. Options can
also come from a JSON config file (--config) whose keys are the snake_case
spelling of the flag names; explicit flags always win. Exit codes: 0 success,
2 usage error, 1 runtime error. Diagnostics go to stderr; machine-readable
output goes to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import engine
from .anchors import AnchorSet
from .dataio import SynthConfig, generate_dataset, read_manifest
from .errors import IntegrityError, ManifestError, NumericError
from .evaluation import (EvalConfig, EvalReport, evaluate, write_froc_svg,
                         write_pr_svg, write_report_csv, write_summary_json)
from .losses import LossConfig, baseline_focal_config
from .network import ModelConfig, forward_detector, postprocess, study_verdict
from .preprocess import dump_processed, preprocess_record
from .trainer import TrainConfig, load_checkpoint, model_from_checkpoint, run_training


class UsageError(Exception):
    """Bad invocation discovered after argparse (exit code 2)."""


# Real defaults live here, not in argparse, so that a config file can fill
# anything the command line left unset and explicit flags still win.
_DEFAULTS = {
    "gen-data": {"out": None, "seed": 0, "image-size": 256, "n-tb": 8,
                 "n-healthy": 8},
    "preprocess": {"manifest": None, "out": None, "image-size": 256},
    "train": {"manifest": None, "val-manifest": None, "out": None, "seed": 0,
              "image-size": 256, "epochs": 10, "lr": 1e-4, "batch-size": 1,
              "backbone-widths": "16,32,64,64,64", "fpn-channels": 64,
              "head-depth": 4, "no-fp-head": False, "no-oriented-heads": False,
              "baseline-focal-loss": False},
    "eval": {"manifest": None, "checkpoint": None, "out": None,
             "iou-thresh": 0.3, "score-thresh": 0.05, "nms-iou": 0.5,
             "top-k": 100, "threads": 1},
    "predict": {"manifest": None, "checkpoint": None, "out": None,
                "score-thresh": 0.05, "nms-iou": 0.5, "top-k": 100,
                "force-verdict": None},
    "curves": {"report": None, "out": None},
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tbloc",
        description="Lesion detection on radiographs: synthesize data, "
                    "preprocess, train, evaluate, predict, plot curves.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p):
        p.add_argument("--config", metavar="PATH",
                       help="JSON file of option defaults (snake_case keys); "
                            "explicit flags win")
        p.add_argument("--lenient-config", action="store_const", const=True,
                       help="warn about unknown config keys instead of failing")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--image-size", type=int, metavar="N")
    p.add_argument("--n-tb", type=int, metavar="N", help="number of tb studies")
    p.add_argument("--n-healthy", type=int, metavar="N",
                   help="number of healthy studies")

    p = sub.add_parser("preprocess", help="run the image pipeline, dump results")
    common(p)
    p.add_argument("--manifest", metavar="PATH")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--image-size", type=int, metavar="N")

    p = sub.add_parser("train", help="train a detector")
    common(p)
    p.add_argument("--manifest", metavar="PATH", help="training manifest")
    p.add_argument("--val-manifest", metavar="PATH",
                   help="validation manifest (default: the training manifest)")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--image-size", type=int, metavar="N")
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--lr", type=float, metavar="F")
    p.add_argument("--batch-size", type=int, metavar="N")
    p.add_argument("--backbone-widths", metavar="W1,..,W5",
                   help="channel widths of the five backbone stages")
    p.add_argument("--fpn-channels", type=int, metavar="N")
    p.add_argument("--head-depth", type=int, metavar="N")
    p.add_argument("--no-fp-head", action="store_const", const=True,
                   help="ablation: train without the study-level head")
    p.add_argument("--no-oriented-heads", action="store_const", const=True,
                   help="ablation: plain 3x3 final regression layer")
    p.add_argument("--baseline-focal-loss", action="store_const", const=True,
                   help="ablation: focal loss alpha=0.25 gamma=2.0, "
                        "no hard-example weight")

    p = sub.add_parser("eval", help="evaluate a checkpoint, write a report")
    common(p)
    p.add_argument("--manifest", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--iou-thresh", type=float, metavar="F")
    p.add_argument("--score-thresh", type=float, metavar="F")
    p.add_argument("--nms-iou", type=float, metavar="F")
    p.add_argument("--top-k", type=int, metavar="N")
    p.add_argument("--threads", type=int, metavar="N")

    p = sub.add_parser("predict", help="emit detections as JSON lines")
    common(p)
    p.add_argument("--manifest", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--out", metavar="PATH", help="output file (default stdout)")
    p.add_argument("--score-thresh", type=float, metavar="F")
    p.add_argument("--nms-iou", type=float, metavar="F")
    p.add_argument("--top-k", type=int, metavar="N")
    p.add_argument("--force-verdict", choices=("healthy", "tb"),
                   help="debugging: override the study head's verdict")

    p = sub.add_parser("curves", help="plot P-R and fROC curves from a report CSV")
    common(p)
    p.add_argument("--report", metavar="PATH", help="report.csv from eval")
    p.add_argument("--out", metavar="DIR")

    return parser


def merge_options(command, args):
    """Overlay hard defaults, config file values, then explicit flags."""
    defaults = dict(_DEFAULTS[command])
    merged = {k.replace("-", "_"): v for k, v in defaults.items()}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        known = set(merged)
        for key, value in loaded.items():
            name = key.replace("-", "_")
            if name not in known:
                if getattr(args, "lenient_config", None):
                    print(f"warning: ignoring unknown config key {key!r}",
                          file=sys.stderr)
                    continue
                raise UsageError(f"unknown config key {key!r} for {command}")
            merged[name] = value
    for name in merged:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    return merged


def _require(opts, command, *names):
    for name in names:
        if opts.get(name) in (None, ""):
            raise UsageError(f"{command}: --{name.replace('_', '-')} is required")


def _parse_widths(value):
    if isinstance(value, (list, tuple)):
        widths = tuple(int(v) for v in value)
    else:
        try:
            widths = tuple(int(part) for part in str(value).split(","))
        except ValueError as exc:
            raise UsageError(f"bad --backbone-widths value {value!r}") from exc
    if len(widths) != 5:
        raise UsageError("--backbone-widths needs exactly five values")
    return widths


def cmd_gen_data(opts):
    _require(opts, "gen-data", "out")
    config = SynthConfig(n_tb=int(opts["n_tb"]), n_healthy=int(opts["n_healthy"]),
                         image_size=int(opts["image_size"]),
                         seed=int(opts["seed"]))
    records = generate_dataset(config, opts["out"])
    print(f"wrote {len(records)} records under {opts['out']}", file=sys.stderr)
    return 0


def cmd_preprocess(opts):
    _require(opts, "preprocess", "manifest", "out")
    records = read_manifest(opts["manifest"])
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "processed.jsonl", "w", encoding="ascii") as fh:
        for record in records:
            processed = preprocess_record(record, int(opts["image_size"]))
            dump_processed(processed, out_dir / f"{processed.id}.pgm")
            row = {"id": processed.id, "label": processed.label,
                   "boxes": [[float(v) for v in box] for box in processed.boxes],
                   "scale": [float(processed.scale[0]), float(processed.scale[1])]}
            fh.write(json.dumps(row) + "\n")
    print(f"processed {len(records)} images into {out_dir}", file=sys.stderr)
    return 0


def cmd_train(opts):
    _require(opts, "train", "manifest", "out")
    model_config = ModelConfig(
        image_size=int(opts["image_size"]),
        backbone_widths=_parse_widths(opts["backbone_widths"]),
        fpn_channels=int(opts["fpn_channels"]),
        head_depth=int(opts["head_depth"]),
        oriented_heads=not opts["no_oriented_heads"],
        fp_head=not opts["no_fp_head"])
    train_records = read_manifest(opts["manifest"])
    val_source = opts["val_manifest"] or opts["manifest"]
    val_records = read_manifest(val_source)
    loss = LossConfig()
    if opts["baseline_focal_loss"]:
        loss = baseline_focal_config(loss)
    train_config = TrainConfig(learning_rate=float(opts["lr"]),
                               epochs=int(opts["epochs"]),
                               batch_size=int(opts["batch_size"]),
                               seed=int(opts["seed"]), loss=loss)

    def progress(epoch, summary, val_ap):
        p1 = "-" if summary.phase1_loss is None else f"{summary.phase1_loss:.6f}"
        p2 = "-" if summary.phase2_loss is None else f"{summary.phase2_loss:.6f}"
        ap = "-" if val_ap is None else f"{val_ap:.6f}"
        print(f"epoch {epoch} phase1_loss {p1} phase2_loss {p2} val_ap {ap}",
              file=sys.stderr)

    best, _ = run_training(train_records, val_records, model_config,
                           train_config, opts["out"], progress=progress)
    ap = "-" if best.val_ap is None else f"{best.val_ap:.6f}"
    print(f"best epoch {best.epoch} val_ap {ap}", file=sys.stderr)
    return 0


def cmd_eval(opts):
    _require(opts, "eval", "manifest", "checkpoint", "out")
    records = read_manifest(opts["manifest"])
    config = EvalConfig(iou_thresh=float(opts["iou_thresh"]),
                        score_thresh=float(opts["score_thresh"]),
                        nms_iou=float(opts["nms_iou"]),
                        top_k=int(opts["top_k"]), threads=int(opts["threads"]))
    report = evaluate(opts["checkpoint"], records, config)
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out_dir / "report.csv")
    write_summary_json(report, out_dir / "summary.json")
    if report.pr_points:
        write_pr_svg(report, out_dir / "pr.svg")
    if report.froc_points:
        write_froc_svg(report, out_dir / "froc.svg")
    print((out_dir / "summary.json").read_text(encoding="ascii"), end="")
    return 0


def cmd_predict(opts):
    _require(opts, "predict", "manifest", "checkpoint")
    records = read_manifest(opts["manifest"])
    model = model_from_checkpoint(load_checkpoint(opts["checkpoint"]))
    anchor_set = AnchorSet(model.config.anchor_config())
    force = opts["force_verdict"]

    lines = []
    for record in records:
        processed = preprocess_record(record, model.config.image_size)
        with engine.no_grad():
            preds = forward_detector(model, processed.pixels[None, None])
        detections = postprocess(preds, anchor_set,
                                 score_thresh=float(opts["score_thresh"]),
                                 nms_iou=float(opts["nms_iou"]),
                                 top_k=int(opts["top_k"]), image_id=record.id)
        if force is not None:
            verdict = force
        elif preds.study_logits is not None:
            verdict = study_verdict(preds.study_logits)
        else:
            verdict = None
        if verdict == "healthy":
            detections = []
        sx, sy = processed.scale
        boxes = [[d.box[0] / sx, d.box[1] / sy, d.box[2] / sx, d.box[3] / sy,
                  d.score] for d in detections]
        lines.append(json.dumps({"id": record.id, "boxes": boxes,
                                 "study_verdict": verdict}))

    text = "".join(line + "\n" for line in lines)
    if opts["out"]:
        Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(opts["out"]).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)
    return 0


def cmd_curves(opts):
    _require(opts, "curves", "report", "out")
    pr_points, froc_points = [], []
    try:
        with open(opts["report"], newline="") as fh:
            for row in csv.DictReader(fh):
                recall = float(row["recall"])
                if row["precision"] != "":
                    pr_points.append((recall, float(row["precision"])))
                froc_points.append((float(row["avg_fp_per_image"]), recall))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot parse report {opts['report']}: {exc}") from exc
    report = EvalReport(ap=None, image_count=0, gt_count=0, detection_count=0,
                        pr_points=pr_points, froc_points=froc_points)
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pr_svg(report, out_dir / "pr.svg")
    write_froc_svg(report, out_dir / "froc.svg")
    print(f"wrote {out_dir / 'pr.svg'} and {out_dir / 'froc.svg'}",
          file=sys.stderr)
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "curves": cmd_curves,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        opts = merge_options(args.command, args)
        return _COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ManifestError, IntegrityError, NumericError, ValueError,
            RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
