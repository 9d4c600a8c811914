"""ExperimentConfig: one YAML file bundling every knob of a run."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional

import yaml

from .anchors import AnchorConfig
from .detector import DetectorConfig
from .evaluator import EvalConfig
from .losses import LossConfig
from .samplers import SamplerConfig
from .scenes import DatasetSpec
from .trainer import Schedule

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


_SECTIONS = {
    "dataset": DatasetSpec,
    "anchors": AnchorConfig,
    "detector": DetectorConfig,
    "loss": LossConfig,
    "sampler": SamplerConfig,
    "schedule": Schedule,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    loss: LossConfig = field(default_factory=lambda: LossConfig(guided=True, optimal_bias=True))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    schedule: Schedule = field(default_factory=Schedule)
    eval: EvalConfig = field(default_factory=lambda: EvalConfig(threshold="adaptive"))
    seed: int = 0
    train_fraction: float = 5.0 / 6.0
    out: Optional[str] = None

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.detector.C != self.dataset.C:
            raise ConfigError(f"detector C={self.detector.C} but dataset C={self.dataset.C}")
        if self.detector.num_anchors != self.anchors.anchors_per_location:
            raise ConfigError(
                f"detector num_anchors={self.detector.num_anchors} but anchors give {self.anchors.anchors_per_location} per location"
            )

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"schema_version": SCHEMA_VERSION}
        for name in _SECTIONS:
            section = getattr(self, name)
            d[name] = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
        d["seed"] = self.seed
        d["train_fraction"] = self.train_fraction
        d["out"] = self.out
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        d = copy.deepcopy(d) or {}
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        kwargs: Dict[str, Any] = {}
        defaults = _default_sections()
        for name, klass in _SECTIONS.items():
            section = d.pop(name, None) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name for f in fields(klass)}
            unknown = set(section) - known
            if unknown:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
            try:
                # missing keys take the experiment defaults, not the bare dataclass ones
                kwargs[name] = klass(**{**defaults[name], **section})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        for key in ("seed", "train_fraction", "out"):
            if key in d:
                kwargs[key] = d.pop(key)
        if d:
            raise ConfigError(f"unknown top-level keys: {sorted(d)}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        """sha256 of the canonical JSON form; key order and the output directory do not matter."""
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with nested overrides, e.g. ``replace(loss={"guided": False})``."""
        d = self.to_dict()
        for key, value in changes.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict):
                d[key] = {**d[key], **value}
            else:
                d[key] = value
        return ExperimentConfig.from_dict(d)


def _default_sections() -> Dict[str, Dict[str, Any]]:
    d = ExperimentConfig().to_dict()
    return {name: d[name] for name in _SECTIONS}


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return ExperimentConfig.from_dict(raw or {})


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


# Named runs on the default benchmark.  Every entry sets all mechanism switches
# so nothing leaks in from the sampling-free defaults.  All runs share the
# default schedule.
BENCHMARK_RUNS: Dict[str, Dict[str, Any]] = {
    "sampling-free": {
        "loss": {"cls_variant": "ce", "guided": True, "fixed_w": None, "optimal_bias": True, "init_pi": None},
        "eval": {"threshold": "adaptive"},
    },
    "focal": {
        "loss": {"cls_variant": "focal", "guided": False, "fixed_w": None, "optimal_bias": False, "init_pi": 0.01},
        "eval": {"threshold": 0.05},
    },
    "ce-zero-bias": {
        "loss": {"cls_variant": "ce", "guided": False, "fixed_w": 1.0, "optimal_bias": False, "init_pi": None},
    },
    "guided-only": {
        "loss": {"cls_variant": "ce", "guided": True, "fixed_w": None, "optimal_bias": False, "init_pi": 0.01},
    },
    "bias-only": {
        "loss": {"cls_variant": "ce", "guided": False, "fixed_w": None, "optimal_bias": True, "init_pi": None},
    },
}


def benchmark_config(name: str, seed: int = 0, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    if name not in BENCHMARK_RUNS:
        raise ConfigError(f"unknown benchmark run {name!r}; choose from {sorted(BENCHMARK_RUNS)}")
    return (base or ExperimentConfig()).replace(seed=seed, **BENCHMARK_RUNS[name])
