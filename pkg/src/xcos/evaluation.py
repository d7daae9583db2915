"""Verification accuracy, teacher correlation, occlusion sweeps and the U/P/L ablation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionNet
from .data import DataError, PairRecord, apply_mask, free_form_mask, normalize
from .metric import CalibrationTable, calibrate_from_maps, cosine_map_tensor, frobenius
from .training import TeacherModel, XCosModel, teacher_scores


@dataclass(frozen=True)
class ScoredPair:
    score: float
    label: bool
    ref: str = ""

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"score for {self.ref!r} is not finite")


@dataclass
class EvalReport:
    variant: str
    accuracy: float
    thresholds: list[float]
    fold_accuracies: list[float]
    n_pos: int
    n_neg: int
    folds: list[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def reports_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text table, one row per report."""
    rows = [("variant", "accuracy", "folds", "pos", "neg")]
    for r in reports:
        rows.append((r.variant, f"{r.accuracy:.4f}", str(len(r.fold_accuracies)), str(r.n_pos), str(r.n_neg)))
    widths = [max(len(row[k]) for row in rows) for k in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows) + "\n"


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def best_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Smallest threshold maximising accuracy of ``score > threshold``.

    Candidates are -inf (everything positive), the midpoints between adjacent
    distinct scores and the largest score (everything negative).
    """
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order].astype(bool)
    uniq = np.unique(s)
    # counts of scores <= each distinct value
    le = np.searchsorted(s, uniq, side="right")
    pos_le = np.concatenate([[0], np.cumsum(y)])[le]
    neg_le = le - pos_le
    n_pos = int(y.sum())
    correct = np.concatenate([[n_pos], (n_pos - pos_le) + neg_le])
    thresholds = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2, uniq[-1:]])
    k = int(np.argmax(correct))
    return float(thresholds[k]), correct[k] / len(s)


def best_threshold_accuracy(scored: Sequence[ScoredPair], k_folds: int = 10, rng=0,
                            variant: str = "") -> EvalReport:
    """k-fold protocol: fit the threshold on k-1 folds, score the held-out fold."""
    scores = np.array([p.score for p in scored], dtype=np.float64)
    labels = np.array([p.label for p in scored], dtype=bool)
    if k_folds < 2:
        raise ValueError(f"need at least 2 folds, got {k_folds}")
    if len(scores) < k_folds:
        raise ValueError(f"{len(scores)} pairs cannot fill {k_folds} folds")
    if labels.all() or not labels.any():
        raise ValueError("both positive and negative pairs are required")
    perm = _rng(rng).permutation(len(scores))
    folds = np.array_split(perm, k_folds)
    assignment = np.empty(len(scores), dtype=int)
    thresholds, accs = [], []
    for f, test in enumerate(folds):
        assignment[test] = f
        train = np.concatenate([folds[g] for g in range(k_folds) if g != f])
        thr, _ = best_threshold(scores[train], labels[train])
        thresholds.append(thr)
        accs.append(float(np.mean((scores[test] > thr) == labels[test])))
    return EvalReport(variant, float(np.mean(accs)), thresholds, accs,
                      int(labels.sum()), int((~labels).sum()), assignment.tolist())


def pearson_r(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("pearson_r needs two equal-length sequences of at least 2 values")
    ac, bc = a - a.mean(), b - b.mean()
    va, vb = (ac ** 2).sum(), (bc ** 2).sum()
    if va == 0 or vb == 0:
        raise ValueError("pearson_r is undefined for a constant input")
    return float(np.clip((ac * bc).sum() / np.sqrt(va * vb), -1.0, 1.0))


# scoring

def pair_images(pairs: Sequence[PairRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.stack([normalize(p.image_a) for p in pairs])
    b = np.stack([normalize(p.image_b) for p in pairs])
    return a, b, np.array([p.label for p in pairs], dtype=bool)


def attention_maps(variant: str, fa: np.ndarray, fb: np.ndarray, net: AttentionNet | None = None,
                   calibration: CalibrationTable | None = None, clip_negative: bool = False) -> np.ndarray:
    n, _, h, w = fa.shape
    if variant == "unit":
        return np.full((n, h, w), 1.0 / (h * w))
    if variant == "correlated":
        if calibration is None:
            raise ValueError("correlated attention needs a calibration table")
        return np.broadcast_to(calibration.attention(clip_negative).values, (n, h, w)).copy()
    if variant == "learned":
        out = [net(fa[i:i + 64], fb[i:i + 64]).data for i in range(0, n, 64)]
        return np.concatenate(out)
    raise ValueError(f"unknown attention variant {variant!r}")


def xcos_scores(model: XCosModel, images_a: np.ndarray, images_b: np.ndarray, variant: str = "learned",
                calibration: CalibrationTable | None = None, clip_negative: bool = False
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (xcos values, S maps, W maps) for aligned image batches."""
    fa, fb = model.grids_numpy(images_a), model.grids_numpy(images_b)
    s = cosine_map_tensor(fa, fb).data
    w = attention_maps(variant, fa, fb, model.attention, calibration, clip_negative)
    return frobenius(s, w).data, s, w


def pair_key(pair: PairRecord) -> tuple[str, str]:
    return tuple(sorted((pair.image_a.key, pair.image_b.key)))


def calibrate(model: XCosModel, teacher: TeacherModel, pairs: Sequence[PairRecord]) -> CalibrationTable:
    """Correlated attention from the model's local cosines and the teacher's global cosine."""
    a, b, _ = pair_images(pairs)
    _, s, _ = xcos_scores(model, a, b, "unit")
    table = calibrate_from_maps(s, teacher_scores(teacher, a, b), teacher.identifier)
    table.pair_ids = ["\t".join(pair_key(p)) for p in pairs]
    return table


# occlusion

@dataclass
class OcclusionPoint:
    coverage: float
    xcos_accuracy: float
    teacher_accuracy: float
    masked_grid_s: float
    unmasked_grid_s: float


def grid_coverage(mask_cells: np.ndarray, grid_extent: tuple[int, int]) -> np.ndarray:
    """Fraction of masked pixels inside each grid cell."""
    h, w = mask_cells.shape
    gh, gw = grid_extent
    return mask_cells.reshape(gh, h // gh, gw, w // gw).mean(axis=(1, 3))


def _masked_images(pairs: Sequence[PairRecord], coverage: float, seed: int, fill: float):
    """One seeded mask per distinct image; returns masked arrays and per-image masks."""
    rng = np.random.default_rng([seed, int(round(coverage * 1_000_000))])
    cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for p in pairs:
        for rec in (p.image_a, p.image_b):
            if rec.key in cache:
                continue
            img = normalize(rec)
            mask = free_form_mask(img.shape[-2:], coverage, rng)
            cache[rec.key] = (apply_mask(img, mask, fill), mask.cells)
    a = np.stack([cache[p.image_a.key][0] for p in pairs])
    b = np.stack([cache[p.image_b.key][0] for p in pairs])
    ma = np.stack([cache[p.image_a.key][1] for p in pairs])
    mb = np.stack([cache[p.image_b.key][1] for p in pairs])
    return a, b, ma, mb


def occlusion_sweep(model: XCosModel, teacher: TeacherModel, pairs: Sequence[PairRecord],
                    coverages: Sequence[float], seed: int = 0, variant: str = "learned",
                    calibration: CalibrationTable | None = None, k_folds: int = 5,
                    fill: float = 0.0) -> list[OcclusionPoint]:
    """Score both models on identically masked pairs at each coverage."""
    labels = np.array([p.label for p in pairs], dtype=bool)
    refs = ["\t".join(pair_key(p)) for p in pairs]
    grid_extent = model.config.grid_extent
    curve = []
    for coverage in coverages:
        if not 0.0 <= coverage <= 1.0:
            raise ValueError(f"coverage must lie in [0, 1], got {coverage}")
        if coverage == 0.0:
            a, b, _ = pair_images(pairs)
            ma = mb = None
        else:
            a, b, ma, mb = _masked_images(pairs, coverage, seed, fill)
        xs, s, _ = xcos_scores(model, a, b, variant, calibration)
        ts = teacher_scores(teacher, a, b)
        x_rep = best_threshold_accuracy([ScoredPair(v, l, r) for v, l, r in zip(xs, labels, refs)],
                                        k_folds, seed, variant)
        t_rep = best_threshold_accuracy([ScoredPair(v, l, r) for v, l, r in zip(ts, labels, refs)],
                                        k_folds, seed, "teacher")
        masked_s = unmasked_s = float("nan")
        if ma is not None:
            cov = np.stack([np.maximum(grid_coverage(x, grid_extent), grid_coverage(y, grid_extent))
                            for x, y in zip(ma, mb)])
            occluded = cov >= 0.5
            pos_s, pos_occ = s[labels], occluded[labels]
            if pos_occ.any():
                masked_s = float(pos_s[pos_occ].mean())
            if (~pos_occ).any():
                unmasked_s = float(pos_s[~pos_occ].mean())
        curve.append(OcclusionPoint(float(coverage), x_rep.accuracy, t_rep.accuracy, masked_s, unmasked_s))
    return curve


# ablation

def ablation_run(model: XCosModel, calibration: CalibrationTable, pairs: Sequence[PairRecord],
                 k_folds: int = 10, seed: int = 0, clip_negative: bool = False) -> list[EvalReport]:
    """U, P and L attention evaluated on the same pairs and folds."""
    calib_ids = set(calibration.pair_ids)
    keys = ["\t".join(pair_key(p)) for p in pairs]
    leaked = calib_ids.intersection(keys)
    if leaked:
        raise DataError(f"{len(leaked)} evaluation pair(s) were used for calibration, e.g. {sorted(leaked)[0]!r}")
    a, b, labels = pair_images(pairs)
    fa, fb = model.grids_numpy(a), model.grids_numpy(b)
    s = cosine_map_tensor(fa, fb).data
    reports = []
    for variant in ("unit", "correlated", "learned"):
        w = attention_maps(variant, fa, fb, model.attention, calibration, clip_negative)
        scores = frobenius(s, w).data
        reports.append(best_threshold_accuracy(
            [ScoredPair(v, l, r) for v, l, r in zip(scores, labels, keys)], k_folds, seed, variant))
    return reports
