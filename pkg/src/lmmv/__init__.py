"""Unified longitudinal multi-view classifier with missingness-masked fusion."""
from .analysis import ImportanceReport, WindowSpec, subset_eval, view_importance, window_eval
from .config import RunConfig
from .estimator import LongitudinalClassifier
from .gradcheck import GradCheckReport, finite_difference_check
from .metrics import EvalReport, aggregate_seeds, average_precision, macro_accuracy, one_vs_rest, roc_auc
from .model import Batch, ModelConfig, UnifiedModel
from .objective import AdamW, ScheduleConfig, class_weights, one_cycle_lr, weighted_masked_ce
from .trainer import (Checkpoint, TrainConfig, Trainer, load_checkpoint, save_checkpoint, train,
                      train_view_specific)

__version__ = "0.1.0"

__all__ = [
    "ImportanceReport", "WindowSpec", "subset_eval", "view_importance", "window_eval", "RunConfig",
    "LongitudinalClassifier", "GradCheckReport", "finite_difference_check", "EvalReport",
    "aggregate_seeds", "average_precision", "macro_accuracy", "one_vs_rest", "roc_auc", "Batch",
    "ModelConfig", "UnifiedModel", "AdamW", "ScheduleConfig", "class_weights", "one_cycle_lr",
    "weighted_masked_ce", "Checkpoint", "TrainConfig", "Trainer", "load_checkpoint",
    "save_checkpoint", "train", "train_view_specific",
]
