"""Regularized gated architectures for robust multimodal sensor fusion."""

from .corruption import (
    AssignmentScheme,
    CorruptionManifest,
    CorruptionSpec,
    FailureModel,
    build_corrupted_dataset,
)
from .datasets import Dataset, load_dataset, load_driver, load_har, save_dataset, synth_dataset
from .estimators import FusionClassifier, SensorFailureTransformer
from .harness import (
    ExperimentConfig,
    RunReport,
    evaluate_accuracy,
    fusion_weight_histogram,
    run_experiment_grid,
    train,
)
from .models import FusionModel, ModelConfig, total_loss

__version__ = "0.1.0"

__all__ = [
    "AssignmentScheme",
    "CorruptionManifest",
    "CorruptionSpec",
    "Dataset",
    "ExperimentConfig",
    "FailureModel",
    "FusionClassifier",
    "FusionModel",
    "ModelConfig",
    "RunReport",
    "SensorFailureTransformer",
    "build_corrupted_dataset",
    "evaluate_accuracy",
    "fusion_weight_histogram",
    "load_dataset",
    "load_driver",
    "load_har",
    "run_experiment_grid",
    "save_dataset",
    "synth_dataset",
    "total_loss",
    "train",
]
