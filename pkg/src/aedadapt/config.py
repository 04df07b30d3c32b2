"""Run configuration: one JSON document with a section per pipeline stage.

Every field has a default, so ``{}`` is a valid config.  Unknown keys are
rejected at every level.  Command-line flags override file values.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .aed import AedConfig
from .data import CorpusConfig
from .errors import ContractError
from .experiment import ExperimentGrid


def _flat_from_dict(cls, d: Mapping, section: str):
    if not isinstance(d, Mapping):
        raise ContractError(f"config section {section!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ContractError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ContractError(f"bad value in config section {section!r}: {e}") from None


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 2
    enc_hidden: int = 32
    dec_layers: int = 2
    dim: int = 32
    att_dim: int = 32
    init_scale: float = 0.08

    def aed_config(self, feat_dim: int, vocab_size: int) -> AedConfig:
        return AedConfig(feat_dim=feat_dim, vocab_size=vocab_size, **asdict(self))


@dataclass(frozen=True)
class TrainConfig:
    """Adam with cosine decay from ``lr`` to ``min_lr``; gradients clipped at ``clip`` per utterance."""

    epochs: int = 60
    batch_size: int = 64
    lr: float = 5e-3
    min_lr: float = 1.5e-4
    clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.clip <= 0:
            raise ContractError("training needs epochs >= 0, batch_size >= 1 and positive lr/clip")
        if not 0 < self.min_lr <= self.lr:
            raise ContractError("min_lr must lie in (0, lr]")


@dataclass(frozen=True)
class CharConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 5e-3
    clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.clip <= 0:
            raise ContractError("character training needs epochs >= 0, batch_size >= 1 and positive lr/clip")


@dataclass(frozen=True)
class Config:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    char: CharConfig = field(default_factory=CharConfig)
    grid: ExperimentGrid = field(default_factory=ExperimentGrid)

    def to_dict(self) -> dict:
        return {"corpus": self.corpus.to_dict(), "model": asdict(self.model), "train": asdict(self.train),
                "char": asdict(self.char), "grid": self.grid.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Config":
        if not isinstance(d, Mapping):
            raise ContractError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ContractError(f"unknown config sections: {sorted(unknown)}")
        try:
            corpus = CorpusConfig.from_dict(d.get("corpus", {}))
            grid = ExperimentGrid.from_dict(d.get("grid", {}))
        except TypeError as e:
            raise ContractError(f"bad config value: {e}") from None
        return cls(
            corpus=corpus,
            model=_flat_from_dict(ModelConfig, d.get("model", {}), "model"),
            train=_flat_from_dict(TrainConfig, d.get("train", {}), "train"),
            char=_flat_from_dict(CharConfig, d.get("char", {}), "char"),
            grid=grid,
        )


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ContractError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ContractError(f"config file {path} is not valid JSON: {e}") from None
    return Config.from_dict(raw)
