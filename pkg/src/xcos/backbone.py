"""Convolutional trunk with a 1x1 head producing spatial grid features."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .config import BackboneConfig
from .layers import Conv2d, Module, collect, glorot_uniform


@dataclass(frozen=True)
class GridFeature:
    """A (c_F, h_F, w_F) feature map; ``grid(i, j)`` is the c_F-vector at a cell."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"grid feature must be 3-D (c, h, w), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid feature contains non-finite entries")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def grid(self, i: int, j: int) -> np.ndarray:
        return self.values[:, i, j]


def flatten(grid: GridFeature) -> np.ndarray:
    """Row-major flattening of the (c, h, w) grid into the identity embedding."""
    return grid.values.reshape(-1).copy()


def unflatten(embedding: np.ndarray, shape: tuple[int, int, int]) -> GridFeature:
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.size != int(np.prod(shape)):
        raise ShapeError(f"cannot unflatten {embedding.size} entries into {shape}")
    return GridFeature(embedding.reshape(shape).copy())


class GridBackbone(Module):
    """Stride-2 3x3 conv+ReLU blocks followed by a 1x1 conv (no activation)."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.blocks: list[Conv2d] = []
        c_in = 3
        for c_out in config.block_channels:
            self.blocks.append(Conv2d(c_in, c_out, 3, stride=2, padding=1, rng=rng))
            c_in = c_out
        self.head = Conv2d(c_in, config.grid_channels, 1, rng=rng)

    def trunk(self, x: Tensor) -> Tensor:
        for conv in self.blocks:
            x = ad.relu(conv(x))
        return x

    def __call__(self, x) -> Tensor:
        """(N, 3, H, W) normalised images to (N, c_F, h_F, w_F) grid features."""
        x = ad.as_tensor(x)
        expected = (3, *self.config.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"expected images of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        return self.head(self.trunk(x))

    def named_parameters(self):
        params = OrderedDict()
        for k, conv in enumerate(self.blocks):
            params.update(collect(f"block{k}", conv))
        params.update(collect("head", self.head))
        return params

    def load_trunk(self, other: "GridBackbone | object") -> None:
        """Copy conv-block weights from another trunk with identical shapes."""
        for mine, theirs in zip(self.blocks, other.blocks):
            if mine.weight.shape != theirs.weight.shape:
                raise ShapeError("trunk shapes differ")
            mine.weight.data = theirs.weight.data.copy()
            mine.bias.data = theirs.bias.data.copy()


def extract_grid(image: np.ndarray, backbone: GridBackbone) -> GridFeature:
    """Grid feature of a single normalised (3, H, W) image."""
    image = np.asarray(image, dtype=np.float64)
    expected = (3, *backbone.config.input_size)
    if image.shape != expected:
        raise ShapeError(f"image shape {image.shape} does not match expected {expected}")
    return GridFeature(backbone(image[None]).data[0].copy())


def extract_grids(images: np.ndarray, backbone: GridBackbone, batch: int = 64) -> np.ndarray:
    """Batched inference: (N, 3, H, W) -> (N, c_F, h_F, w_F) array."""
    images = np.asarray(images, dtype=np.float64)
    out = [backbone(images[i:i + batch]).data for i in range(0, len(images), batch)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, *backbone.config.grid_shape))


class ClassWeights(Module):
    """One embedding row per training identity."""

    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(glorot_uniform((n_classes, dim), dim, n_classes, rng))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self):
        return OrderedDict(weight=self.weight)


def class_cosines(embedding, weights) -> Tensor:
    """Cosine between each embedding row and each class row: (N, d) x (n, d) -> (N, n).

    A 1-D embedding gives a 1-D result.
    """
    emb = ad.as_tensor(embedding)
    w = weights.weight if isinstance(weights, ClassWeights) else ad.as_tensor(weights)
    single = emb.ndim == 1
    if single:
        emb = emb.reshape(1, -1)
    if emb.shape[1] != w.shape[1]:
        raise ShapeError(f"embedding dim {emb.shape[1]} != class weight dim {w.shape[1]}")
    out = ad.matmul(ad.l2_normalize(emb, axis=1), ad.l2_normalize(w, axis=1).transpose())
    return out.reshape(-1) if single else out
