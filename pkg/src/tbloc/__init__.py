"""Desk-scale lesion localization in chest radiographs.

A small anchor-based one-stage detector with an image-level false-positive
restrictor, plus the synthetic data, training, and evaluation tooling
needed to run it end to end on a CPU.
"""

from .engine import Tensor, grad_check, no_grad
from .dataio import ImageRecord, SynthConfig, generate_dataset, read_manifest, write_manifest
from .preprocess import preprocess_record
from .anchors import AnchorSet, generate_anchors, iou_matrix, match_anchors
from .network import ModelConfig, build_model
from .losses import LossConfig
from .trainer import TrainConfig, run_training, load_checkpoint, save_checkpoint
from .evaluation import EvalConfig, evaluate
from .estimators import LesionDetector, RadiographPreprocessor

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "grad_check",
    "no_grad",
    "ImageRecord",
    "SynthConfig",
    "generate_dataset",
    "read_manifest",
    "write_manifest",
    "preprocess_record",
    "AnchorSet",
    "generate_anchors",
    "iou_matrix",
    "match_anchors",
    "ModelConfig",
    "build_model",
    "LossConfig",
    "TrainConfig",
    "run_training",
    "load_checkpoint",
    "save_checkpoint",
    "EvalConfig",
    "evaluate",
    "LesionDetector",
    "RadiographPreprocessor",
    "__version__",
]
