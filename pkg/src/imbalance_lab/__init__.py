"""Foreground-background imbalance experiments for a toy dense detector.

A small numpy autodiff engine drives a single-level anchor detector on
synthetic scenes.  Losses cover CE, Focal, GHM-C, guided loss scaling and
optimal bias initialisation; baselines cover biased sampling and OHEM.
"""

from .anchors import AnchorConfig, build_anchors, imbalance_stats, match
from .config import BENCHMARK_RUNS, ExperimentConfig, benchmark_config, load_config
from .detector import DetectorConfig, forward, init_detector
from .evaluator import EvalConfig, evaluate, threshold_sweep
from .losses import LossConfig, initial_loss_analytic, optimal_bias
from .samplers import SamplerConfig
from .scenes import DatasetSpec, generate
from .tensor import ParamStore, Value, backward
from .trainer import Schedule, train

__all__ = [
    "AnchorConfig",
    "BENCHMARK_RUNS",
    "DatasetSpec",
    "DetectorConfig",
    "EvalConfig",
    "ExperimentConfig",
    "LossConfig",
    "ParamStore",
    "SamplerConfig",
    "Schedule",
    "Value",
    "backward",
    "benchmark_config",
    "build_anchors",
    "evaluate",
    "forward",
    "generate",
    "imbalance_stats",
    "init_detector",
    "initial_loss_analytic",
    "load_config",
    "match",
    "optimal_bias",
    "threshold_sweep",
    "train",
]

__version__ = "0.1.0"
