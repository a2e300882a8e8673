"""Run configuration: one JSON file, strict keys, dotted --set overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .numerics import ConfigError
from .trainer import TrainConfig
from .tree import CompressionSchedule, Policy, SplitParams, schedule_for


@dataclass
class PretrainConfig:
    """Base-model stage: the plain decoder trained on short windows."""
    steps: int = 4000
    lr: float = 3e-3
    batch_size: int = 16
    seq_len: int = 256
    warmup_ratio: float = 0.02
    passkey_fraction: float = 0.0   # share of short in-window passkey documents


@dataclass
class TreeConfig:
    depth: int = 3
    gamma_lm: float = 5.0
    gamma_query: float = 10.0
    min_len: int = 16
    policy: str = "query_aware"

    def __post_init__(self):
        Policy(self.policy)


@dataclass
class ScheduleConfig:
    alpha_leaf: int = 2


@dataclass
class DataConfig:
    corpus_chars: int = 2_000_000
    order: int = 2
    topic_len: int = 2048
    heldout_fraction: float = 0.05
    passkey_fraction: float = 0.0
    key_digits: int = 5
    passkey_samples: int = 200


@dataclass
class PathsConfig:
    corpus: str = "corpus.txt"
    passkey: str = "passkey.jsonl"
    checkpoint: str = "model.ckpt"
    output_dir: str = "runs/default"


@dataclass
class EvalConfig:
    lengths: list[int] = field(default_factory=lambda: [512, 1024, 2048, 4096, 8192])
    windows: int = 8
    passkey_lengths: list[int] = field(default_factory=lambda: [512, 2048])
    passkey_samples: int = 200


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    chunk_size: int = 128
    train_len: int = 512
    running_len: int = 128
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.running_len > self.train_len:
            raise ConfigError("running_len exceeds train_len")
        if self.chunk_size < 2 * self.tree.min_len:
            raise ConfigError("chunk_size must be >= 2 * tree.min_len")

    def compression_schedule(self) -> CompressionSchedule:
        return schedule_for(self.tree.depth, self.schedule.alpha_leaf)

    def lm_split(self) -> SplitParams:
        return SplitParams(gamma=self.tree.gamma_lm, min_len=self.tree.min_len, rng_seed=self.seed)

    def query_split(self) -> SplitParams:
        return SplitParams(gamma=self.tree.gamma_query, min_len=self.tree.min_len, rng_seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys at {where or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        kwargs[k] = _build(t, v, f"{where}.{k}".lstrip(".")) if dataclasses.is_dataclass(t) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where or 'config'}: {e}") from None


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} walks into a non-object")
        node[parts[-1]] = parse_value(value)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    return from_dict(apply_overrides(data, overrides or []))
