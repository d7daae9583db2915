"""scikit-learn style wrapper: fit on labelled face images, predict on image pairs."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import evaluation as ev
from .backbone import GridFeature
from .config import BackboneConfig, MarginConfig, TrainConfig
from .data import DataError, ImageRecord, normalize, sample_pairs
from .metric import VARIANTS, AttentionMap, XcosScore, patched_cosine_map, xcos as xcos_value
from .training import new_xcos_model, teacher_scores, train_teacher, train_xcos


def check_images(X, size: tuple[int, int] | None = None) -> np.ndarray:
    """Validate an (n, H, W, 3) image batch with integer values in [0, 255]; returns uint8."""
    X = check_array(X, allow_nd=True, dtype=None, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (n, H, W, 3), got {X.shape}")
    if size is not None and X.shape[1:3] != tuple(size):
        raise ValueError(f"expected {size[0]}x{size[1]} images, got {X.shape[1]}x{X.shape[2]}")
    if X.dtype != np.uint8:
        if np.any(X < 0) or np.any(X > 255) or np.any(X != np.round(X)):
            raise ValueError("pixel values must be integers in [0, 255]")
        X = X.astype(np.uint8)
    return X


def check_pairs(P, size: tuple[int, int] | None = None) -> np.ndarray:
    """Validate an (n, 2, H, W, 3) batch of image pairs."""
    P = np.asarray(P)
    if P.ndim != 5 or P.shape[1] != 2:
        raise ValueError(f"expected pairs shaped (n, 2, H, W, 3), got {P.shape}")
    flat = check_images(P.reshape(-1, *P.shape[2:]), size)
    return flat.reshape(P.shape)


class XCosVerifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Train a teacher and an xCos model on identity-labelled images, then verify pairs.

    ``fit(X, y)`` takes images (n, H, W, 3) and identity labels. ``predict`` and
    ``decision_function`` take pairs (n, 2, H, W, 3). ``transform`` maps images
    to flattened grid features.
    """

    def __init__(self, input_size=(56, 56), block_channels=(16, 32, 64), grid_channels=32,
                 variant="learned", epochs=20, teacher_epochs=20, base_lr=0.1, lam=1.0,
                 batch_size=32, mask_prob=0.5, init_from_teacher=True, margin_s=16.0,
                 margin_m=0.3, calib_pairs=300, clip_negative=False, random_state=0):
        self.input_size = input_size
        self.block_channels = block_channels
        self.grid_channels = grid_channels
        self.variant = variant
        self.epochs = epochs
        self.teacher_epochs = teacher_epochs
        self.base_lr = base_lr
        self.lam = lam
        self.batch_size = batch_size
        self.mask_prob = mask_prob
        self.init_from_teacher = init_from_teacher
        self.margin_s = margin_s
        self.margin_m = margin_m
        self.calib_pairs = calib_pairs
        self.clip_negative = clip_negative
        self.random_state = random_state

    def _train_config(self, epochs: int) -> TrainConfig:
        drops = tuple(e for e in (12, 15, 18) if e <= epochs)
        return TrainConfig(lam=self.lam, batch_size=self.batch_size, base_lr=self.base_lr,
                           lr_drop_epochs=drops, total_epochs=epochs, rng_seed=self.random_state,
                           init_trunk_from_teacher=self.init_from_teacher, mask_prob=self.mask_prob)

    def fit(self, X, y):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        backbone = BackboneConfig(tuple(self.input_size), tuple(self.block_channels), self.grid_channels)
        X = check_images(X, backbone.input_size)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must hold one label per image, got shape {y.shape}")
        self.classes_, ids = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two identities")
        records = [ImageRecord(int(k), img, f"{k:03d}/{i:04d}") for i, (k, img) in enumerate(zip(ids, X))]
        margin = MarginConfig(self.margin_s, self.margin_m)
        self.teacher_, _ = train_teacher(records, self._train_config(self.teacher_epochs), margin, backbone)
        cfg = self._train_config(self.epochs)
        model = new_xcos_model(records, backbone, cfg, self.teacher_)
        self.model_, self.history_ = train_xcos(records, self.teacher_, cfg, margin, backbone, model=model)

        rng = np.random.default_rng(self.random_state)
        try:
            pairs = sample_pairs(records, self.calib_pairs, self.calib_pairs, rng)
        except DataError:
            n_pos = sum(c * (c - 1) // 2 for c in np.bincount(ids))
            n = min(self.calib_pairs, n_pos)
            pairs = sample_pairs(records, n, n, rng)
        self.calibration_ = ev.calibrate(self.model_, self.teacher_, pairs)
        a, b, labels = ev.pair_images(pairs)
        scores, _, _ = ev.xcos_scores(self.model_, a, b, self.variant, self.calibration_, self.clip_negative)
        self.threshold_ = ev.best_threshold(scores, labels)[0]
        self.backbone_ = backbone
        return self

    def _split(self, P) -> tuple[np.ndarray, np.ndarray]:
        check_is_fitted(self, "model_")
        P = check_pairs(P, self.backbone_.input_size)
        a = np.stack([normalize(img) for img in P[:, 0]])
        b = np.stack([normalize(img) for img in P[:, 1]])
        return a, b

    def decision_function(self, P) -> np.ndarray:
        a, b = self._split(P)
        scores, _, _ = ev.xcos_scores(self.model_, a, b, self.variant, self.calibration_, self.clip_negative)
        return scores

    def predict(self, P) -> np.ndarray:
        return self.decision_function(P) > self.threshold_

    def teacher_score(self, P) -> np.ndarray:
        a, b = self._split(P)
        return teacher_scores(self.teacher_, a, b)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.backbone_.input_size)
        grids = self.model_.grids_numpy(np.stack([normalize(img) for img in X]))
        return grids.reshape(len(X), -1)

    def explain(self, image_a, image_b) -> XcosScore:
        """S map, W map and the xCos value for one pair."""
        a, b = self._split(np.stack([image_a, image_b])[None])
        fa, fb = self.model_.grids_numpy(a)[0], self.model_.grids_numpy(b)[0]
        s = patched_cosine_map(GridFeature(fa), GridFeature(fb))
        w = ev.attention_maps(self.variant, fa[None], fb[None], self.model_.attention,
                              self.calibration_, self.clip_negative)[0]
        return xcos_value(s, AttentionMap(self.variant, w))
