"""Continual low-rank adaptation with interference-aware orthogonality."""

from .contlearn import STRATEGIES, TrainConfig, run_sequence
from .errors import (
    ConfigError,
    ContiLoraError,
    ConvergenceError,
    DimensionError,
    NonFiniteError,
    TrainingDivergence,
    UndefinedInputError,
)
from .evalkit import MetricsReport, PerformanceMatrix, compute_metrics
from .matcore import BACKEND
from .taskgen import make_regression_suite, make_suite, make_toy_diffusion_suite

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "STRATEGIES",
    "ConfigError",
    "ContiLoraError",
    "ConvergenceError",
    "DimensionError",
    "MetricsReport",
    "NonFiniteError",
    "PerformanceMatrix",
    "TrainConfig",
    "TrainingDivergence",
    "UndefinedInputError",
    "compute_metrics",
    "make_regression_suite",
    "make_suite",
    "make_toy_diffusion_suite",
    "run_sequence",
]
