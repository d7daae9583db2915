"""Typed configuration records shared by the library and the CLI."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    input_size: tuple[int, int] = (56, 56)
    block_channels: tuple[int, ...] = (16, 32, 64)
    grid_channels: int = 32

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "block_channels", tuple(int(v) for v in self.block_channels))
        h, w = self.input_size
        k = len(self.block_channels)
        if k < 1:
            raise ConfigError("need at least one stride-2 block")
        for extent in (h, w):
            if extent % 7 or (extent // 7) & (extent // 7 - 1) or extent // 7 < 2 ** k:
                raise ConfigError(
                    f"input extent {extent} must be 7*2^j with j >= {k} blocks")
        if self.grid_channels < 2:
            raise ConfigError("grid_channels must be >= 2")

    @property
    def grid_extent(self) -> tuple[int, int]:
        k = len(self.block_channels)
        return self.input_size[0] >> k, self.input_size[1] >> k

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.grid_channels, *self.grid_extent)

    @property
    def embedding_dim(self) -> int:
        return int(math.prod(self.grid_shape))

    @classmethod
    def full_scale(cls) -> "BackboneConfig":
        """112x112 input, four blocks, 32-channel 7x7 grid."""
        return cls(input_size=(112, 112), block_channels=(16, 32, 64, 128), grid_channels=32)


@dataclass(frozen=True)
class AttentionConfig:
    # correlated attention: clip negative Pearson weights before use
    clip_negative: bool = False
    # display only: renormalise positive-clipped correlated weights to sum 1
    renormalize_display: bool = False


@dataclass(frozen=True)
class MarginConfig:
    s: float = 16.0
    m: float = 0.3

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError(f"scale s must be positive, got {self.s}")
        if not 0 <= self.m < math.pi / 2:
            raise ConfigError(f"margin m must lie in [0, pi/2), got {self.m}")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    batch_size: int = 32
    pairs_per_batch: int | None = None
    base_lr: float = 1e-3
    lr_drop_epochs: tuple[int, ...] = (12, 15, 18)
    total_epochs: int = 20
    rng_seed: int = 0
    hflip: bool = True
    teacher_dim: int = 256
    init_trunk_from_teacher: bool = False
    # fraction of xCos-branch pair images that get a free-form mask (0 disables)
    mask_prob: float = 0.0
    mask_coverage: tuple[float, float] = (0.1, 0.4)

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        object.__setattr__(self, "mask_coverage", tuple(float(c) for c in self.mask_coverage))
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ConfigError("batch_size and total_epochs must be positive")
        if self.pairs_per_batch is not None and self.pairs_per_batch < 1:
            raise ConfigError("pairs_per_batch must be positive")
        if any(not 1 <= e <= self.total_epochs for e in self.lr_drop_epochs):
            raise ConfigError(f"lr_drop_epochs {self.lr_drop_epochs} outside [1, {self.total_epochs}]")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")

    @property
    def n_pairs(self) -> int:
        return self.pairs_per_batch or max(1, self.batch_size // 2)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: plain SGD needs a larger base rate than 1e-3 to move in 20 epochs."""
        values = dict(base_lr=0.1, init_trunk_from_teacher=True, mask_prob=0.5)
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class SynthConfig:
    identities: int = 20
    images_per_identity: int = 30
    image_size: tuple[int, int] = (56, 56)
    intra_class_noise: float = 0.08
    max_shift: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.identities < 2 or self.images_per_identity < 2:
            raise ConfigError("need >= 2 identities and >= 2 images per identity")
        if not 0 <= self.max_shift <= 4:
            raise ConfigError("max_shift must lie in [0, 4]")


@dataclass(frozen=True)
class EvalConfig:
    k_folds: int = 10
    occlusion_folds: int = 5
    threshold: float = 0.5
    holdout_per_identity: int = 10
    calib_pairs: int = 300
    test_pairs: int = 300


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs; mirrors the JSON config file."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    margin: MarginConfig = field(default_factory=MarginConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return to_dict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {name: _build(_SECTION_TYPES[name], data[name]) for name in data}
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


_SECTION_TYPES = {
    "backbone": BackboneConfig,
    "attention": AttentionConfig,
    "margin": MarginConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
}


def _build(cls, values: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**values)


def to_dict(obj) -> dict[str, Any]:
    """Dataclass to plain JSON-ready dict (tuples become lists)."""
    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (tuple, list)):
            return [convert(x) for x in v]
        return v
    return convert(obj)


def from_dict(cls, values: dict[str, Any]):
    return _build(cls, values)
