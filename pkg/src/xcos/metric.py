"""Patched cosine maps, attention maps and the xCos score.

The xCos value of a pair is the Frobenius inner product of the per-grid
cosine map ``S`` and an attention map ``W``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .backbone import GridFeature

logger = logging.getLogger(__name__)

VARIANTS = ("unit", "correlated", "learned")


@dataclass(frozen=True)
class PatchedCosineMap:
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ShapeError(f"cosine map must be 2-D, got {v.shape}")
        if np.any(np.abs(v) > 1 + 1e-9):
            raise ValueError("cosine map entries must lie in [-1, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class AttentionMap:
    variant: str
    values: np.ndarray

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        v = self.values
        if v.ndim != 2:
            raise ShapeError(f"attention map must be 2-D, got {v.shape}")
        if self.variant == "correlated":
            if np.any(np.abs(v) > 1 + 1e-12):
                raise ValueError("correlated attention entries must lie in [-1, 1]")
        elif np.any(v <= 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"{self.variant} attention must be positive and sum to 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class XcosScore:
    value: float
    s: PatchedCosineMap
    w: AttentionMap


@dataclass
class CalibrationTable:
    """Per-grid Pearson correlation between local cosine and teacher cosine."""

    pearson: np.ndarray
    pair_count: int
    teacher_id: str = ""
    zero_variance: np.ndarray = field(default=None)
    pair_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.pearson = np.asarray(self.pearson, dtype=np.float64)
        if self.pearson.ndim != 2:
            raise ShapeError(f"calibration table must be 2-D, got {self.pearson.shape}")
        if np.any(np.abs(self.pearson) > 1 + 1e-12):
            raise ValueError("Pearson entries must lie in [-1, 1]")
        if self.pair_count < 2:
            raise ValueError("calibration needs at least 2 pairs")
        if self.zero_variance is None:
            self.zero_variance = np.zeros(self.pearson.shape, dtype=bool)

    def attention(self, clip_negative: bool = False) -> AttentionMap:
        values = np.clip(self.pearson, 0.0, None) if clip_negative else self.pearson.copy()
        return AttentionMap("correlated", values)

    def display_weights(self) -> np.ndarray:
        """Positive-clipped weights rescaled to sum 1 (for inspection only)."""
        pos = np.clip(self.pearson, 0.0, None)
        total = pos.sum()
        return pos / total if total > 0 else np.full(pos.shape, 1.0 / pos.size)

    def to_dict(self) -> dict:
        return {
            "pearson": self.pearson.tolist(),
            "pair_count": int(self.pair_count),
            "teacher_id": self.teacher_id,
            "zero_variance": self.zero_variance.tolist(),
            "pair_ids": list(self.pair_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationTable":
        return cls(np.array(data["pearson"], dtype=np.float64), int(data["pair_count"]),
                   data.get("teacher_id", ""),
                   np.array(data.get("zero_variance", np.zeros(np.shape(data["pearson"]))), dtype=bool),
                   list(data.get("pair_ids", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# tensor-level building blocks (batched, differentiable)

def cosine_map_tensor(fa, fb) -> Tensor:
    """(N, c, h, w) x (N, c, h, w) -> (N, h, w) per-grid cosines."""
    fa, fb = ad.as_tensor(fa), ad.as_tensor(fb)
    if fa.shape != fb.shape:
        raise ShapeError(f"grid feature shapes differ: {fa.shape} vs {fb.shape}")
    axis = fa.ndim - 3
    return ad.cosine(fa, fb, axis=axis)


def frobenius(s, w) -> Tensor:
    """Sum over the trailing two axes of ``s * w``; ``w`` may broadcast."""
    s, w = ad.as_tensor(s), ad.as_tensor(w)
    if s.shape[-2:] != w.shape[-2:]:
        raise ShapeError(f"map shapes differ: {s.shape} vs {w.shape}")
    return (s * w).sum(axis=(-2, -1))


# public per-pair API

def patched_cosine_map(fa: GridFeature, fb: GridFeature) -> PatchedCosineMap:
    if fa.shape != fb.shape:
        raise ShapeError(f"grid feature shapes differ: {fa.shape} vs {fb.shape}")
    return PatchedCosineMap(cosine_map_tensor(fa.values, fb.values).data)


def unit_attention(h: int, w: int) -> AttentionMap:
    if h < 1 or w < 1:
        raise ValueError(f"attention extent must be positive, got {h}x{w}")
    return AttentionMap("unit", np.full((h, w), 1.0 / (h * w)))


def xcos(s: PatchedCosineMap, w: AttentionMap) -> XcosScore:
    if s.shape != w.shape:
        raise ShapeError(f"cosine map {s.shape} and attention {w.shape} differ")
    return XcosScore(float(np.sum(s.values * w.values)), s, w)


def verify(score: XcosScore | float, threshold: float) -> bool:
    value = score.value if isinstance(score, XcosScore) else float(score)
    return value > threshold


def pearson_per_grid(local: np.ndarray, teacher: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson r along axis 0 of ``local`` (K, h, w) against ``teacher`` (K,).

    Returns the correlation map and a mask of zero-variance grids (set to 0).
    """
    local = np.asarray(local, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if local.shape[0] != teacher.shape[0]:
        raise ShapeError("one teacher score per pair required")
    lc = local - local.mean(axis=0)
    tc = teacher - teacher.mean()
    cov = np.tensordot(tc, lc, axes=(0, 0))
    var_l = (lc ** 2).sum(axis=0)
    var_t = (tc ** 2).sum()
    scale = np.sqrt(var_l * var_t)
    # exact constancy check: mean subtraction leaves round-off behind
    degenerate = (np.ptp(local, axis=0) == 0) | (np.ptp(teacher) == 0) | (scale <= 1e-300)
    safe = np.where(degenerate, 1.0, scale)
    r = np.where(degenerate, 0.0, cov / safe)
    return np.clip(r, -1.0, 1.0), degenerate


def correlated_attention(pairs: Sequence[tuple[GridFeature, GridFeature, float]],
                         teacher_id: str = "") -> CalibrationTable:
    """Build the calibration table from (feature_a, feature_b, teacher_cosine) triples."""
    if len(pairs) < 2:
        raise ValueError(f"correlated attention needs at least 2 pairs, got {len(pairs)}")
    shape = pairs[0][0].shape
    local, teacher = [], []
    for fa, fb, c in pairs:
        if fa.shape != shape or fb.shape != shape:
            raise ShapeError(f"all grid features must share shape {shape}")
        local.append(patched_cosine_map(fa, fb).values)
        teacher.append(float(getattr(c, "value", c)))
    return calibrate_from_maps(np.stack(local), np.asarray(teacher), teacher_id)


def calibrate_from_maps(local: np.ndarray, teacher: Iterable[float],
                        teacher_id: str = "") -> CalibrationTable:
    teacher = np.asarray(list(teacher), dtype=np.float64)
    if len(teacher) < 2:
        raise ValueError(f"correlated attention needs at least 2 pairs, got {len(teacher)}")
    r, degenerate = pearson_per_grid(local, teacher)
    if degenerate.any():
        logger.warning("%d grid(s) have zero variance; their correlated weight is set to 0",
                       int(degenerate.sum()))
    return CalibrationTable(r, len(teacher), teacher_id, degenerate)
