"""Experiment configuration: dataclasses plus a strict YAML round-trip.

Unknown keys and wrongly typed values are rejected with the dotted path of the
offending field, so a typo in a config file never silently falls back to a
default.
"""

from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attention import FilterSpec
from .errors import ConfigError

ARCHS = ("vanilla", "luna", "convluna", "luna-only-scaling", "luna-only-filtering")
POOLINGS = ("memory-average", "token-mean", "cls")
TASK_KINDS = ("listops", "marker", "pixel-grid", "file-ingest")


@dataclass
class ModelConfig:
    arch: str = "convluna"
    blocks: int = 2
    d: int = 64
    h: int = 4
    mlp_dim: int = 128
    memory_size: int | None = 16
    filter: FilterSpec = field(default_factory=lambda: FilterSpec("maxpool", 4, 1))
    vocab_size: int = 32
    max_len: int = 128
    num_classes: int = 2
    dropout: float = 0.0
    pooling: str | None = None
    dual_input: bool = False
    # None picks the architecture default (shared + identity for ConvLuna variants).
    share_projections: bool | None = None
    value_projection: str | None = None

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"model.arch must be one of {ARCHS}, got {self.arch!r}")
        if self.arch == "vanilla":
            if self.memory_size:
                raise ConfigError("model.memory_size: the vanilla architecture has no memory")
        elif not self.memory_size or self.memory_size < 1:
            raise ConfigError(f"model.memory_size must be >= 1 for arch {self.arch!r}")
        if self.arch == "luna-only-scaling" and self.filter.kind != "identity":
            raise ConfigError("model.filter: luna-only-scaling applies no filtering (kind must be identity)")
        if self.arch == "luna-only-filtering" and self.filter.kind == "identity":
            raise ConfigError("model.filter: luna-only-filtering needs a conv or maxpool filter")
        for name in ("blocks", "d", "h", "mlp_dim", "vocab_size", "max_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.d % self.h:
            raise ConfigError(f"model.d={self.d} must be divisible by model.h={self.h}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must be in [0, 1)")
        if self.pooling is not None and self.pooling not in POOLINGS:
            raise ConfigError(f"model.pooling must be one of {POOLINGS}")
        if self.arch == "vanilla" and self.pooling == "memory-average":
            raise ConfigError("model.pooling: vanilla has no memory to average")
        if self.value_projection is not None and self.value_projection not in ("learned", "identity"):
            raise ConfigError("model.value_projection must be 'learned' or 'identity'")

    @property
    def has_memory(self) -> bool:
        return self.arch != "vanilla"

    @property
    def rescaled(self) -> bool:
        return self.arch in ("convluna", "luna-only-scaling", "luna-only-filtering")

    @property
    def temperature_mode(self) -> str:
        return "learnable-exp-tau" if self.arch in ("convluna", "luna-only-scaling") else "fixed-sqrt"

    @property
    def effective_pooling(self) -> str:
        if self.pooling is not None:
            return self.pooling
        return "token-mean" if self.arch == "vanilla" else "memory-average"

    @property
    def effective_share(self) -> bool:
        return self.share_projections if self.share_projections is not None else self.rescaled

    @property
    def effective_value_projection(self) -> str:
        if self.value_projection is not None:
            return self.value_projection
        return "identity" if self.rescaled else "learned"


@dataclass
class TrainConfig:
    base_lr: float = 0.005
    weight_decay: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    snapshot_every: int = 100
    eval_every: int = 100
    grad_clip: float | None = None
    precision: str = "standard"
    record_wall_time: bool = False

    def __post_init__(self) -> None:
        if self.base_lr <= 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("train: base_lr and adam_eps must be positive, weight_decay non-negative")
        if self.warmup_steps < 1:
            raise ConfigError("train.warmup_steps must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("train.total_steps must be >= 0")
        if self.total_steps and self.warmup_steps > self.total_steps:
            raise ConfigError("train.warmup_steps must not exceed train.total_steps")
        if self.batch_size < 1 or self.snapshot_every < 1 or self.eval_every < 1:
            raise ConfigError("train: batch_size, snapshot_every and eval_every must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train: betas must lie in [0, 1)")
        if self.precision not in ("standard", "high"):
            raise ConfigError("train.precision must be 'standard' or 'high'")


@dataclass
class TaskSpec:
    kind: str = "marker"
    min_len: int = 128
    max_len: int = 128
    min_depth: int = 1
    max_depth: int = 3
    vocab_size: int = 32
    num_classes: int = 2
    seed: int = 0
    dual_input: bool = False
    n_train: int = 10000
    n_val: int = 1000
    grid: int = 16
    noise: float = 0.1
    train_path: str | None = None
    val_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError(f"task length bounds infeasible: [{self.min_len}, {self.max_len}]")
        if self.min_depth < 1 or self.max_depth < self.min_depth:
            raise ConfigError(f"task depth bounds infeasible: [{self.min_depth}, {self.max_depth}]")
        if self.kind == "file-ingest" and not self.train_path:
            raise ConfigError("task.train_path is required for file-ingest tasks")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    output_dir: str = "runs"
    run_name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [0])
    memory_sizes: list[int] | None = None

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")


# ---------------------------------------------------------------------------
# Strict (de)serialisation
# ---------------------------------------------------------------------------


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null is not allowed")
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(hint)
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(hint):
        return from_dict(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {hint!r}")


def from_dict(cls, data: Any, path: str = ""):
    """Build dataclass ``cls`` from plain data, rejecting unknown keys."""
    where = path or cls.__name__
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(value, hints[name], sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_experiment(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(ExperimentConfig, apply_overrides(data, overrides or []))


def dump_experiment(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def parse_experiment(text: str) -> ExperimentConfig:
    return from_dict(ExperimentConfig, yaml.safe_load(text) or {})
