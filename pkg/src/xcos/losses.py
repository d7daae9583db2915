"""Additive angular margin loss, xCos regression loss and the LR schedule."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import MarginConfig, TrainConfig

COS_CLAMP = 1.0 - 1e-7


def margin_softmax_loss(cosines, labels, cfg: MarginConfig) -> Tensor:
    """Mean of -log softmax(s * cos(theta + m onehot))[y] over the batch.

    ``cosines`` is (N, n) or a single (n,) row with a scalar label.
    """
    cosines = ad.as_tensor(cosines)
    if cosines.ndim == 1:
        cosines = cosines.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    n_batch, n_cls = cosines.shape
    if labels.shape != (n_batch,) or np.any(labels < 0) or np.any(labels >= n_cls):
        raise ShapeError(f"labels {labels.tolist()} incompatible with cosines of shape {cosines.shape}")
    onehot = np.zeros((n_batch, n_cls))
    onehot[np.arange(n_batch), labels] = 1.0
    c = ad.clip(cosines, -COS_CLAMP, COS_CLAMP)
    target = (c * onehot).sum(axis=1, keepdims=True)
    shifted = ad.cos(ad.arccos(target) + cfg.m)
    logits = (c * (1.0 - onehot) + shifted * onehot) * cfg.s
    return -(ad.log_softmax(logits, axis=1) * onehot).sum() * (1.0 / n_batch)


def regression_loss(c, c_prime) -> Tensor:
    c, c_prime = ad.as_tensor(c), ad.as_tensor(c_prime)
    if c.shape != c_prime.shape or c.ndim != 1 or c.shape[0] < 1:
        raise ShapeError(f"regression loss needs equal-length 1-D inputs, got {c.shape} and {c_prime.shape}")
    return ((c - c_prime) ** 2).mean()


def total_loss(l_cos, l_id, lam: float) -> Tensor:
    return ad.as_tensor(l_cos) + ad.as_tensor(l_id) * lam


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Base rate divided by 10 for every drop epoch already passed."""
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.total_epochs}]")
    drops = sum(1 for d in cfg.lr_drop_epochs if epoch > d)
    return cfg.base_lr / 10 ** drops

