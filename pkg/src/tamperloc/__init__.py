"""tamperloc: weakly-supervised manipulation localization for image-text
pairs, with a synthetic forgery benchmark, verification oracles, and metrics.
"""

from .boxes import Box, iou, iou_corners
from .data import (ConfigurationError, DatasetManifest, ParseError, Sample,
                   generate_dataset, propose_candidates, read_dataset,
                   samples_equal, write_dataset)
from .metrics import MetricsReport, binary_suite, grounding_suite, token_prf
from .model import LOSS_NAMES, Batch, Model, ModelConfig, collate
from .training import (TrainConfig, TrainingError, TrainResult,
                       audit_weak_supervision, evaluate_model, inspect_sample,
                       load_checkpoint, predict, predict_sample,
                       save_checkpoint, total_loss, train)

__version__ = "0.1.0"

__all__ = [
    "Box", "iou", "iou_corners",
    "ConfigurationError", "DatasetManifest", "ParseError", "Sample",
    "generate_dataset", "propose_candidates", "read_dataset", "samples_equal",
    "write_dataset",
    "MetricsReport", "binary_suite", "grounding_suite", "token_prf",
    "LOSS_NAMES", "Batch", "Model", "ModelConfig", "collate",
    "TrainConfig", "TrainingError", "TrainResult", "audit_weak_supervision",
    "evaluate_model", "inspect_sample", "load_checkpoint", "predict",
    "predict_sample", "save_checkpoint", "total_loss", "train",
    "__version__",
]
