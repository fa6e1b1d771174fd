"""Experiment orchestration: configs, synthetic data, training, sweeps, reports."""

from .config import DatasetSpec, EvalConfig, RunConfig, reference_config, resolve_method
from .dataset import Dataset, generate_dataset
from .reporting import emit_report
from .sweeping import sweep
from .training import RunManifest, evaluate, train

__all__ = [
    "Dataset",
    "DatasetSpec",
    "EvalConfig",
    "RunConfig",
    "RunManifest",
    "emit_report",
    "evaluate",
    "generate_dataset",
    "reference_config",
    "resolve_method",
    "sweep",
    "train",
]
