"""Run configuration: a YAML file merged over defaults, then ``--set key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import TrainConfig
from .errors import ConfigError
from .model import ModelConfig


@dataclass
class CorpusConfig:
    paths: list[str] = field(default_factory=list)
    stdlib: bool = False
    max_bytes: int = 8_000_000
    val_fraction: float = 0.1
    seed: int = 0
    block_size: int = 65536


@dataclass
class ProbeConfig:
    length: int | None = None
    n_sequences: int = 16
    every: int = 16
    window: int = 64
    threshold: float = 4.0
    batch_size: int = 8
    seed: int = 1


@dataclass
class SweepConfig:
    start: float = 0.8
    stop: float = 2.0
    interval: float = 0.01
    target_len: int | None = None
    n_sequences: int = 16
    bucket: int = 16
    batch_size: int = 8
    seed: int = 1
    fit_min: int | None = None
    fit_max: int | None = None


@dataclass
class TuneConfig:
    target_len: int | None = None
    len_slack: float = 1.125
    steps: int = 200
    lr: float = 0.05
    batch_size: int = 8
    warmup: int = 20
    final_lr_ratio: float = 0.1
    init: str = "best-uniform"
    focus_constraint: bool = True
    n_sequences: int | None = None
    val_sequences: int = 16
    gradient: str = "exact"
    corr_position: int | None = None
    seed: int = 2


@dataclass
class EvalConfig:
    window: int | None = None
    stride: int | None = None
    n_tokens: int = 32768
    bucket: int = 16


@dataclass
class PasskeyConfig:
    lengths: list[int] | None = None
    depths: int = 10
    keys_per_depth: int = 10
    seed: int = 3


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    passkey: PasskeyConfig = field(default_factory=PasskeyConfig)
    scales: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad values in {where!r}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, f in _SECTIONS.items():
        if name not in data:
            continue
        if name == "scales":
            kwargs[name] = data[name]
        else:
            kwargs[name] = _build(f.default_factory, data[name], name)  # type: ignore[misc]
    return RunConfig(**kwargs)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (data or {}).items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = key.strip().split(".")
        if len(parts) == 1:
            data[parts[0]] = value
        elif len(parts) == 2:
            section = data.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"cannot set {key!r}: {parts[0]!r} is not a section")
            section[parts[1]] = value
        else:
            raise ConfigError(f"override key {key!r} nests too deep")
    return data


def load(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(apply_overrides(data, list(overrides)))
