"""Run configuration: one YAML file with a section per component.

Example::

    seed: 0
    data:      {image_size: 64, num_categories: 4}
    retriever: {codebook_size: 64, code_dim: 16}
    prior:     {epochs: 20}
    model:     {c_e: 32}
    train:     {epochs: 16, lr: 0.02}
    variant: full

Missing sections take their defaults; unknown keys are rejected.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import UsageError
from .model import VARIANTS, ModelConfig
from .prior import PriorTrainConfig
from .retriever import RetrieverConfig
from .synth import GenConfig
from .train import TrainConfig

SEED_ENV = "SHAPEFORMER_SEED"
SECTIONS = {"data": GenConfig, "retriever": RetrieverConfig, "prior": PriorTrainConfig,
            "model": ModelConfig, "train": TrainConfig}


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _build(cls, obj: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise UsageError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid [{section}] section: {exc}") from exc


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "full"
    data: GenConfig = field(default_factory=GenConfig)
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    prior: PriorTrainConfig = field(default_factory=PriorTrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, obj: Optional[dict]) -> "RunConfig":
        obj = dict(obj or {})
        unknown = set(obj) - set(SECTIONS) - {"seed", "variant"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        variant = obj.get("variant", "full")
        if variant not in VARIANTS:
            raise UsageError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        parts = {}
        for name, kind in SECTIONS.items():
            section = obj.get(name) or {}
            if not isinstance(section, dict):
                raise UsageError(f"[{name}] must be a mapping")
            parts[name] = _build(kind, section, name)
        return cls(seed=int(obj.get("seed", 0)), variant=variant, **parts)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "variant": self.variant}
        for name in SECTIONS:
            value = getattr(self, name)
            out[name] = {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
        return out

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one run seed into every component."""
        self.seed = int(seed)
        self.data.seed = self.seed
        self.prior.seed = self.seed
        self.train.seed = self.seed
        return self

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        obj = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
    if obj is not None and not isinstance(obj, dict):
        raise UsageError(f"config {path} must be a mapping")
    return RunConfig.from_dict(obj)


def resolve_seed(flag: Optional[int], config_seed: int) -> int:
    """Flag beats the environment variable, which beats the config file."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return int(config_seed)
