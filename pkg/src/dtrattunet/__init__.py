"""Dual-decoder hybrid transformer segmentation toolkit for CT slices."""

from .config import (
    ConfigError,
    ModelConfig,
    SplitSpec,
    TrainConfig,
    config_hash,
    infection_classes_for_task,
    tiny_model_config,
)
from .data import (
    DatasetError,
    DatasetLayout,
    SliceSample,
    augment,
    load_dataset,
    make_synthetic_samples,
    preprocess,
    split,
)
from .evaluation import (
    ConfusionCounts,
    MetricsReport,
    aggregate_reports,
    confusion_counts,
    dice_macro,
    discretize,
    evaluate,
    f1_micro,
    iou_micro,
    render_overlay,
)
from .model import (
    VARIANT_FLAGS,
    DTrAttUnet,
    DualOutput,
    EncoderBundle,
    build_variant,
    config_for_variant,
    layer_manifest,
    variant_name,
)
from .training import (
    TrainState,
    TrainingDiverged,
    joint_loss,
    load_checkpoint,
    lr_at,
    repeat_runs,
    restore_model,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ModelConfig",
    "SplitSpec",
    "TrainConfig",
    "config_hash",
    "infection_classes_for_task",
    "tiny_model_config",
    "DatasetError",
    "DatasetLayout",
    "SliceSample",
    "augment",
    "load_dataset",
    "make_synthetic_samples",
    "preprocess",
    "split",
    "ConfusionCounts",
    "MetricsReport",
    "aggregate_reports",
    "confusion_counts",
    "dice_macro",
    "discretize",
    "evaluate",
    "f1_micro",
    "iou_micro",
    "render_overlay",
    "VARIANT_FLAGS",
    "DTrAttUnet",
    "DualOutput",
    "EncoderBundle",
    "build_variant",
    "config_for_variant",
    "layer_manifest",
    "variant_name",
    "TrainState",
    "TrainingDiverged",
    "joint_loss",
    "load_checkpoint",
    "lr_at",
    "repeat_runs",
    "restore_model",
    "save_checkpoint",
    "train",
]
