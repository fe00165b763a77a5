"""Experiment configuration: one YAML document with a section per pipeline stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .distill import DistillHyper
from .ga import GAParams
from .model import TeacherHyper


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadConfig:
    n_tasks: int = 10
    n_providers: int = 3
    train_samples: int = 200
    test_samples: int = 200

    def __post_init__(self):
        for name in ("n_tasks", "train_samples", "test_samples"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_providers < 1:
            raise ValueError("n_providers must be >= 1")


@dataclass(frozen=True)
class EvaluateConfig:
    iterations: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class ConsensusConfig:
    n_nodes: int = 4
    n_byzantine: int = 1
    rounds: int = 100

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if not 0 <= self.n_byzantine < self.n_nodes:
            raise ValueError("n_byzantine must be in [0, n_nodes)")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")


@dataclass(frozen=True)
class CompareConfig:
    oracle: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    ga: GAParams = field(default_factory=GAParams)
    teacher: TeacherHyper = field(default_factory=TeacherHyper)
    distill: DistillHyper = field(default_factory=DistillHyper)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)


def _check_type(path: str, value, ftype):
    want = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    if "bool" in want:
        ok = isinstance(value, bool)
    elif "float" in want:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif "int" in want:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = True
    if "None" in want and value is None:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {want}, got {value!r}")
    return float(value) if "float" in want and "None" not in want else value


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _check_type(sub, value, f.type)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}" if path else str(exc)) from None


def parse_config(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(data)


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)
