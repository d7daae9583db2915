"""Teacher model, xCos model and their training loops."""

from __future__ import annotations

import hashlib
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionNet
from .autodiff import Tensor
from .backbone import ClassWeights, GridBackbone, class_cosines
from .config import BackboneConfig, MarginConfig, TrainConfig
from .data import DataError, ImageRecord, apply_mask, free_form_mask, hflip, normalize
from .layers import Linear, Module, collect
from .losses import lr_at_epoch, margin_softmax_loss, regression_loss, total_loss
from .metric import cosine_map_tensor, frobenius

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeacherScore:
    value: float

    def __post_init__(self):
        if not np.isfinite(self.value) or abs(self.value) > 1 + 1e-9:
            raise ValueError(f"teacher score must be finite and in [-1, 1], got {self.value}")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    mean_l_id: float
    mean_l_cos: float
    wall_seconds: float


def _fingerprint(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


class TeacherModel(Module):
    """Conv trunk + flatten + linear head giving a global embedding."""

    def __init__(self, backbone: BackboneConfig, n_classes: int, dim: int = 256,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = backbone
        self.dim = dim
        self.trunk = GridBackbone(backbone, rng)
        c = backbone.block_channels[-1]
        h, w = backbone.grid_extent
        self.head = Linear(c * h * w, dim, rng)
        self.classes = ClassWeights(n_classes, dim, rng)

    @property
    def blocks(self):
        return self.trunk.blocks

    def embed(self, x) -> Tensor:
        x = ad.as_tensor(x)
        feats = self.trunk.trunk(x)
        return self.head(feats.reshape(feats.shape[0], -1))

    def embed_numpy(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = [self.embed(images[i:i + batch]).data for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros((0, self.dim))

    def named_parameters(self):
        params = OrderedDict()
        for k, conv in enumerate(self.trunk.blocks):
            params.update(collect(f"trunk.block{k}", conv))
        params.update(collect("head", self.head))
        params.update(collect("classes", self.classes))
        return params

    @property
    def identifier(self) -> str:
        return "teacher-" + _fingerprint(self)


class XCosModel(Module):
    """Grid backbone + learned attention net + identity classifier weights."""

    def __init__(self, backbone: BackboneConfig, n_classes: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = backbone
        self.backbone = GridBackbone(backbone, rng)
        self.attention = AttentionNet(backbone.grid_shape, rng)
        self.classes = ClassWeights(n_classes, backbone.embedding_dim, rng)

    def grids(self, x) -> Tensor:
        return self.backbone(x)

    def grids_numpy(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = [self.backbone(images[i:i + batch]).data for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros((0, *self.config.grid_shape))

    def pair_score(self, fa, fb) -> tuple[Tensor, Tensor, Tensor]:
        """Batched learned-attention xCos: returns (c, S, L)."""
        s = cosine_map_tensor(fa, fb)
        w = self.attention(fa, fb)
        return frobenius(s, w), s, w

    def backbone_parameters(self):
        return self.backbone.parameters()

    def xcos_parameters(self):
        return self.backbone.parameters() + self.attention.parameters()

    def named_parameters(self):
        params = OrderedDict()
        params.update(collect("backbone", self.backbone))
        params.update(collect("attention", self.attention))
        params.update(collect("classes", self.classes))
        return params


def _check_dataset(records: Sequence[ImageRecord]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for r in records:
        counts[r.identity_id] = counts.get(r.identity_id, 0) + 1
    if len(counts) < 2:
        raise DataError(f"training needs at least 2 identities, got {len(counts)}")
    thin = [k for k, v in counts.items() if v < 2]
    if thin:
        raise DataError(f"identities {thin} have fewer than 2 images")
    return counts


def _label_index(records: Sequence[ImageRecord]) -> dict[int, int]:
    return {ident: k for k, ident in enumerate(sorted({r.identity_id for r in records}))}


def _augment(img: np.ndarray, rng: np.random.Generator, flip: bool) -> np.ndarray:
    return hflip(img) if flip and rng.random() < 0.5 else img


def teacher_score(teacher: TeacherModel, a: np.ndarray, b: np.ndarray) -> TeacherScore:
    emb = teacher.embed(np.stack([a, b])).data
    value = ad.cosine(emb[0], emb[1]).item()
    return TeacherScore(float(np.clip(value, -1.0, 1.0)))


def teacher_scores(teacher: TeacherModel, images_a: np.ndarray, images_b: np.ndarray) -> np.ndarray:
    ea, eb = teacher.embed_numpy(images_a), teacher.embed_numpy(images_b)
    return np.clip(ad.cosine(ea, eb, axis=1).data, -1.0, 1.0)


def train_teacher(records: Sequence[ImageRecord], cfg: TrainConfig, margin: MarginConfig,
                  backbone: BackboneConfig,
                  on_epoch: Callable[[EpochMetrics], None] | None = None
                  ) -> tuple[TeacherModel, list[EpochMetrics]]:
    """Train the global-embedding teacher with the margin loss only."""
    _check_dataset(records)
    index = _label_index(records)
    rng = np.random.default_rng(cfg.rng_seed)
    teacher = TeacherModel(backbone, len(index), cfg.teacher_dim, rng)
    images = np.stack([normalize(r) for r in records])
    labels = np.array([index[r.identity_id] for r in records])
    params = teacher.parameters()
    history = []
    for epoch in range(1, cfg.total_epochs + 1):
        start = time.perf_counter()
        lr = lr_at_epoch(epoch, cfg)
        order = rng.permutation(len(records))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch = np.stack([_augment(images[k], rng, cfg.hflip) for k in idx])
            loss = margin_softmax_loss(class_cosines(teacher.embed(batch), teacher.classes),
                                       labels[idx], margin)
            ad.backward(loss)
            ad.sgd_step(params, lr)
            losses.append(loss.item())
        metrics = EpochMetrics(epoch, lr, float(np.mean(losses)), 0.0, time.perf_counter() - start)
        history.append(metrics)
        logger.info("teacher epoch %d lr %.2e L_id %.4f", epoch, lr, metrics.mean_l_id)
        if on_epoch:
            on_epoch(metrics)
    return teacher, history


def xcos_objective(model: XCosModel, id_images: np.ndarray, id_labels: np.ndarray,
                   images_a: np.ndarray, images_b: np.ndarray, c_prime: np.ndarray,
                   margin: MarginConfig, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    """L_cos + lam * L_id with one backbone pass over all images; returns (total, L_id, L_cos)."""
    n, m = len(id_images), len(images_a)
    grids = model.grids(np.concatenate([id_images, images_a, images_b]))
    l_id = margin_softmax_loss(class_cosines(grids[:n].reshape(n, -1), model.classes),
                               id_labels, margin)
    c, _, _ = model.pair_score(grids[n:n + m], grids[n + m:])
    l_cos = regression_loss(c, c_prime)
    return total_loss(l_cos, l_id, lam), l_id, l_cos


class XCosTrainer:
    """Owns the sampling state for two-branch xCos training."""

    def __init__(self, model: XCosModel, records: Sequence[ImageRecord], teacher: TeacherModel,
                 cfg: TrainConfig, margin: MarginConfig):
        _check_dataset(records)
        self.model = model
        self.teacher = teacher
        self.cfg = cfg
        self.margin = margin
        self.records = list(records)
        index = _label_index(records)
        if len(index) != model.classes.n_classes:
            raise DataError(f"model has {model.classes.n_classes} classes, dataset {len(index)}")
        self.labels = np.array([index[r.identity_id] for r in records])
        self.images = np.stack([normalize(r) for r in records])
        self.rng = np.random.default_rng(cfg.rng_seed + 1)
        self.by_label = [np.flatnonzero(self.labels == k) for k in range(len(index))]

    def _sample_pairs(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        n_pos = n // 2 + n % 2
        rng = self.rng
        a, b = [], []
        for k in range(n):
            if k < n_pos:
                members = self.by_label[rng.integers(len(self.by_label))]
                i, j = rng.choice(members, size=2, replace=False)
            else:
                i = rng.integers(len(self.records))
                j = rng.integers(len(self.records))
                while self.labels[j] == self.labels[i]:
                    j = rng.integers(len(self.records))
            a.append(i)
            b.append(j)
        return np.array(a), np.array(b)

    def _mask(self, img: np.ndarray) -> np.ndarray:
        lo, hi = self.cfg.mask_coverage
        mask = free_form_mask(img.shape[-2:], float(self.rng.uniform(lo, hi)), self.rng)
        return apply_mask(img, mask)

    def step(self, idx: np.ndarray, lr: float) -> tuple[float, float]:
        cfg, rng, model = self.cfg, self.rng, self.model
        ia, ib = self._sample_pairs(cfg.n_pairs)
        id_imgs = [_augment(self.images[k], rng, cfg.hflip) for k in idx]
        clean_a = [_augment(self.images[k], rng, cfg.hflip) for k in ia]
        clean_b = [_augment(self.images[k], rng, cfg.hflip) for k in ib]
        seen_a, seen_b = list(clean_a), list(clean_b)
        if cfg.mask_prob > 0:
            for k in range(len(ia)):
                if rng.random() < cfg.mask_prob:
                    seen_b[k] = self._mask(seen_b[k])
        c_prime = teacher_scores(self.teacher, np.stack(clean_a), np.stack(clean_b))
        loss, l_id, l_cos = xcos_objective(model, np.stack(id_imgs), self.labels[idx],
                                           np.stack(seen_a), np.stack(seen_b), c_prime,
                                           self.margin, cfg.lam)
        ad.backward(loss)
        ad.sgd_step(model.parameters(), lr)
        return l_id.item(), l_cos.item()

    def epoch(self, epoch: int) -> EpochMetrics:
        start = time.perf_counter()
        lr = lr_at_epoch(epoch, self.cfg)
        order = self.rng.permutation(len(self.records))
        ids, coss = [], []
        for i in range(0, len(order), self.cfg.batch_size):
            l_id, l_cos = self.step(order[i:i + self.cfg.batch_size], lr)
            ids.append(l_id)
            coss.append(l_cos)
        return EpochMetrics(epoch, lr, float(np.mean(ids)), float(np.mean(coss)),
                            time.perf_counter() - start)


def train_xcos_epoch(trainer: XCosTrainer, epoch: int) -> EpochMetrics:
    return trainer.epoch(epoch)


def new_xcos_model(records: Sequence[ImageRecord], backbone: BackboneConfig, cfg: TrainConfig,
                   teacher: TeacherModel | None = None) -> XCosModel:
    model = XCosModel(backbone, len(_label_index(records)), np.random.default_rng(cfg.rng_seed))
    if cfg.init_trunk_from_teacher:
        if teacher is None:
            raise ValueError("init_trunk_from_teacher needs a teacher")
        model.backbone.load_trunk(teacher.trunk)
    return model


def train_xcos(records: Sequence[ImageRecord], teacher: TeacherModel, cfg: TrainConfig,
               margin: MarginConfig, backbone: BackboneConfig,
               on_epoch: Callable[[EpochMetrics], None] | None = None,
               model: XCosModel | None = None) -> tuple[XCosModel, list[EpochMetrics]]:
    """Two-branch training against a frozen teacher."""
    model = model or new_xcos_model(records, backbone, cfg, teacher)
    trainer = XCosTrainer(model, records, teacher, cfg, margin)
    history = []
    for epoch in range(1, cfg.total_epochs + 1):
        metrics = trainer.epoch(epoch)
        history.append(metrics)
        logger.info("xcos epoch %d lr %.2e L_id %.4f L_cos %.5f (%.1fs)", epoch, metrics.lr,
                    metrics.mean_l_id, metrics.mean_l_cos, metrics.wall_seconds)
        if on_epoch:
            on_epoch(metrics)
    return model, history


class MetricsLog:
    """Append epoch metrics to a CSV file: epoch, lr, mean_L_id, mean_L_cos, wall_seconds."""

    HEADER = "epoch,lr,mean_L_id,mean_L_cos,wall_seconds\n"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(self.HEADER, encoding="utf-8")

    def __call__(self, m: EpochMetrics) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{m.epoch},{m.lr:.6g},{m.mean_l_id:.6f},{m.mean_l_cos:.6f},{m.wall_seconds:.3f}\n")
