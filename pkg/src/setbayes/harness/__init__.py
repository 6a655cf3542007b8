"""Experiment plumbing: benchmarks, presets, persistence, reports and the CLI."""

from .benchmarks import (
    generate_regression_dataset,
    multiscale_function,
    relative_rmse,
    step_function,
)
from .config import EXPERIMENTS, ExperimentConfig, load_config
from .experiments import run_experiment
from .persist import load_model, persist_model
from .report import MetricsReport, emit_report

__all__ = [
    "EXPERIMENTS",
    "ExperimentConfig",
    "MetricsReport",
    "emit_report",
    "generate_regression_dataset",
    "load_config",
    "load_model",
    "multiscale_function",
    "persist_model",
    "relative_rmse",
    "run_experiment",
    "step_function",
]
