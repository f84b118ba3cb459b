"""Density estimation with invertible transformation stacks and autoregressive
mixture-of-Gaussians conditionals."""

from .data import Dataset, GeneratorSpec, generate
from .metrics import EvalReport, anomaly_scores, average_precision, grid_score, mean_ll_report
from .model import ModelSpec, TanModel, build_model, load_checkpoint, save_checkpoint
from .rng import RandomStream
from .train import TrainConfig, evaluate_nll, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GeneratorSpec",
    "generate",
    "EvalReport",
    "anomaly_scores",
    "average_precision",
    "grid_score",
    "mean_ll_report",
    "ModelSpec",
    "TanModel",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "RandomStream",
    "TrainConfig",
    "evaluate_nll",
    "train",
    "__version__",
]
