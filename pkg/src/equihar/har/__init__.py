"""Windowed Transformer classifiers for gait and dressage-task recognition."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import EvalReport, confusion_matrix, evaluate
from .model import ChannelStandardizer, ModelConfig, TransformerClassifier
from .windows import DEFAULT_DEVICES, NoAnnotationsError, WindowDataset, concat, make_windows, session_windows

__all__ = [
    "ChannelStandardizer",
    "DEFAULT_DEVICES",
    "CheckpointError",
    "EvalReport",
    "ModelConfig",
    "NoAnnotationsError",
    "TransformerClassifier",
    "WindowDataset",
    "concat",
    "confusion_matrix",
    "evaluate",
    "load_checkpoint",
    "make_windows",
    "save_checkpoint",
    "session_windows",
]
