"""xCos: explainable cosine similarity for face verification."""

from .autodiff import Parameter, ShapeError, Tensor, backward, conv2d, grad_check
from .attention import AttentionNet, learned_attention
from .backbone import GridBackbone, GridFeature, extract_grid
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import (AttentionConfig, BackboneConfig, ConfigError, EvalConfig, MarginConfig,
                     RunConfig, SynthConfig, TrainConfig)
from .data import DataError, ImageRecord, PairRecord, free_form_mask, sample_pairs, synth_identities
from .estimator import XCosVerifier
from .evaluation import EvalReport, ablation_run, best_threshold_accuracy, occlusion_sweep, pearson_r
from .explain import ExplanationRecord, explain_export
from .losses import margin_softmax_loss, regression_loss, total_loss
from .metric import (AttentionMap, CalibrationTable, PatchedCosineMap, XcosScore, correlated_attention,
                     patched_cosine_map, unit_attention, verify, xcos)
from .training import TeacherModel, XCosModel, train_teacher, train_xcos

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "AttentionMap", "AttentionNet", "BackboneConfig", "CalibrationTable",
    "Checkpoint", "CheckpointError", "ConfigError", "DataError", "EvalConfig", "EvalReport",
    "ExplanationRecord", "GridBackbone", "GridFeature", "ImageRecord", "MarginConfig", "PairRecord",
    "Parameter", "PatchedCosineMap", "RunConfig", "ShapeError", "SynthConfig", "TeacherModel",
    "Tensor", "TrainConfig", "XCosModel", "XCosVerifier", "XcosScore", "ablation_run", "backward",
    "best_threshold_accuracy", "conv2d", "correlated_attention", "explain_export", "extract_grid",
    "free_form_mask", "grad_check", "learned_attention", "load_checkpoint", "margin_softmax_loss",
    "occlusion_sweep", "patched_cosine_map", "pearson_r", "regression_loss", "sample_pairs",
    "save_checkpoint", "synth_identities", "total_loss", "train_teacher", "train_xcos",
    "unit_attention", "verify", "xcos",
]
