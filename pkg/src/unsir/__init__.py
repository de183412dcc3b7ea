"""Class-level machine unlearning by error-maximizing noise, impair and repair."""

from .config import ExperimentConfig
from .data import (ClassPartition, LabeledDataset, RetainSubset, SyntheticSpec, batches, generate_synthetic,
                   load_cifar_binary, load_idx, partition, sample_retain_subset)
from .errors import (ConfigError, ContractError, DivergenceError, FormatError, FrozenModelError, ShapeError,
                     UnsirError, ZeroGlanceViolation)
from .estimators import UNSIR, NetClassifier
from .metrics import ExceededCap, accuracy, evaluate, layer_weight_distance, prediction_histogram, relearn_time
from .models import Model, ModelSpec, build_model, load_checkpoint, predict, save_checkpoint, train
from .noise import NoiseConfig, NoiseMatrix, build_noise_dataset, init_noise, optimize_noise
from .runner import run_experiment, run_sequential, run_sweep
from .unlearn import BaselineConfig, UnlearnRecord, UnsirConfig, impair, repair, run_baseline, unsir_unlearn

__version__ = "0.1.0"

__all__ = [
    "BaselineConfig", "ClassPartition", "ConfigError", "ContractError", "DivergenceError", "ExceededCap",
    "ExperimentConfig", "FormatError", "FrozenModelError", "LabeledDataset", "Model", "ModelSpec", "NetClassifier",
    "NoiseConfig", "NoiseMatrix", "RetainSubset", "ShapeError", "SyntheticSpec", "UNSIR", "UnlearnRecord",
    "UnsirConfig", "UnsirError", "ZeroGlanceViolation", "accuracy", "batches", "build_model", "build_noise_dataset",
    "evaluate", "generate_synthetic", "impair", "init_noise", "layer_weight_distance", "load_checkpoint",
    "load_cifar_binary", "load_idx", "optimize_noise", "partition", "predict", "prediction_histogram",
    "relearn_time", "repair", "run_baseline", "run_experiment", "run_sequential", "run_sweep",
    "sample_retain_subset", "save_checkpoint", "train", "unsir_unlearn",
]
