"""Pairwise PCB defect detection.

Compares a defect-free template image against a tested image of the
same board and localizes six classes of fabrication defects. Includes a
synthetic board generator, a loader for the standard pair-dataset
layout, the detector itself, training and evaluation.
"""

from .anchors import AnchorSet, generate_anchors
from .config import RunConfig
from .data import Annotation, ImagePair, load_deeppcb
from .evaluation import EvalReport, evaluate
from .generator import GeneratorConfig, generate_pairs
from .geometry import Box, NmsParams, ScoredBox, nms
from .model import DefectDetector, ModelConfig, load_checkpoint, save_checkpoint
from .targets import MatchResult, match
from .trainer import TrainResult, evaluate_model, load_samples, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "Annotation",
    "Box",
    "DefectDetector",
    "EvalReport",
    "GeneratorConfig",
    "ImagePair",
    "MatchResult",
    "ModelConfig",
    "NmsParams",
    "RunConfig",
    "ScoredBox",
    "TrainResult",
    "evaluate",
    "evaluate_model",
    "generate_anchors",
    "generate_pairs",
    "load_checkpoint",
    "load_deeppcb",
    "load_samples",
    "match",
    "nms",
    "run_ablation",
    "save_checkpoint",
    "train",
    "__version__",
]
