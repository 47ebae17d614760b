"""Simulated incremental transfer learning across data centers."""

from .checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, parse_config
from .data_centers import CenterDataset, GaussianNoise, apply_noise, load_external, make_synthetic_task
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    ConfigurationError,
    DataError,
    ITLError,
    NumericalError,
)
from .federation import CWT, SWT, RunSpec, TrainingPolicy, run_cwt, run_swt
from .metrics_report import AccuracyMatrix, RunResult, mean_accuracy, monotonicity, significance_vs_ft
from .regularizers import METHODS, RegularizerSettings
from .runner import run_baseline, run_experiment
from .tensor_nn import ModelSpec, MultiHead, SingleHead, init_params, mlp_spec

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AccuracyMatrix",
    "AlignmentError",
    "CenterDataset",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "ConfigurationError",
    "CWT",
    "DataError",
    "ExperimentConfig",
    "GaussianNoise",
    "ITLError",
    "METHODS",
    "ModelSpec",
    "MultiHead",
    "NumericalError",
    "RegularizerSettings",
    "RunResult",
    "RunSpec",
    "SingleHead",
    "SWT",
    "TrainingPolicy",
    "apply_noise",
    "config_hash",
    "decode_checkpoint",
    "encode_checkpoint",
    "init_params",
    "load_checkpoint",
    "load_external",
    "make_synthetic_task",
    "mean_accuracy",
    "mlp_spec",
    "monotonicity",
    "parse_config",
    "run_baseline",
    "run_cwt",
    "run_experiment",
    "run_swt",
    "save_checkpoint",
    "significance_vs_ft",
]
