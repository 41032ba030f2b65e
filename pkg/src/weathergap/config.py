"""Run configuration: one strict, nested YAML document determines a run.

Unknown keys are rejected with their dotted path; every run directory
stores the fully resolved snapshot so runs are reproducible from
(config snapshot, seed) alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import get_args, get_origin, get_type_hints

import yaml

from .corruption import StyleConfig, WeatherConfig
from .model import ModelConfig
from .scenes import ConfigError, CorruptionConfig, GenConfig
from .trainer import TrainConfig


@dataclass
class EvalConfig:
    score_threshold: float = 0.05
    nms_iou_threshold: float = 0.5
    match_iou_threshold: float = 0.5


@dataclass
class SplitSizes:
    source_train: int = 500
    target_train: int = 500
    source_test: int = 100
    target_test: int = 100

    def as_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    master_seed: int = 20260801
    dataset: GenConfig = field(default_factory=GenConfig)
    splits: SplitSizes = field(default_factory=SplitSizes)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.dataset.validate()
        self.corruption.validate()
        self.train.validate()
        if self.model.num_classes != self.dataset.num_classes:
            raise ConfigError(
                f"model.num_classes ({self.model.num_classes}) must match "
                f"dataset.num_classes ({self.dataset.num_classes})"
            )

    def to_yaml(self) -> str:
        return yaml.safe_dump(_plain(dataclasses.asdict(self)), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, path: str):
    """Construct a dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key {path + '.' if path else ''}{key}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path + '.' if path else ''}{name}")
    return cls(**kwargs)


def _coerce(hint, value, path: str):
    origin = get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin in (tuple,):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = get_args(hint)
        if args and args[-1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if args and len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def parse_run_config(data: dict | None) -> RunConfig:
    config = _build(RunConfig, data or {}, "")
    config.validate()
    return config


def load_run_config(path: str) -> RunConfig:
    """Load and validate a YAML run config; parse errors carry line numbers."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse {path}{where}: {getattr(e, 'problem', e)}") from e
    return parse_run_config(data)
