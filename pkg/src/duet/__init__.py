"""Mixture-of-extractors forecaster with frequency-based channel masking."""

from .config import DuetConfig, MetricKind, VariantKind
from .data import (
    SplitSpec, Standardizer, TimeSeriesDataset, WindowSet, instance_denormalize, instance_normalize,
    load_dataset, make_windows, save_dataset, split_dataset,
)
from .errors import *  # noqa: F401,F403
from .model import DuetModel, DuetOutput, RngStreams, build_variant, duet_forward
from .synthetic import make_synthetic
from .training import (
    TrainState, compute_metrics, evaluate, fit, load_checkpoint, run_experiment, save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "DuetConfig", "MetricKind", "VariantKind", "SplitSpec", "Standardizer", "TimeSeriesDataset", "WindowSet",
    "instance_normalize", "instance_denormalize", "load_dataset", "make_windows", "save_dataset",
    "split_dataset", "DuetModel", "DuetOutput", "RngStreams", "build_variant", "duet_forward",
    "make_synthetic", "TrainState", "compute_metrics", "evaluate", "fit", "load_checkpoint",
    "run_experiment", "save_checkpoint",
]
