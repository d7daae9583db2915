"""Learned attention module conditioned on a pair of grid features."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .backbone import GridFeature
from .config import ConfigError
from .layers import Conv2d, Module, collect
from .metric import AttentionMap


class AttentionNet(Module):
    """reduce(fa) ++ reduce(fb) -> conv3x3 -> ReLU -> conv3x3 -> softmax over grids.

    The reduction conv is shared by both inputs.
    """

    def __init__(self, grid_shape: tuple[int, int, int], rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c, h, w = grid_shape
        if c % 2:
            raise ConfigError(f"attention net needs an even channel count, got {c}")
        self.grid_shape = tuple(grid_shape)
        half = c // 2
        self.reduce_conv = Conv2d(c, half, 3, padding=1, rng=rng)
        self.fuse_conv1 = Conv2d(c, half, 3, padding=1, rng=rng)
        self.fuse_conv2 = Conv2d(half, 1, 3, padding=1, rng=rng)

    def logits(self, fa, fb) -> Tensor:
        fa, fb = ad.as_tensor(fa), ad.as_tensor(fb)
        if fa.shape != fb.shape or fa.shape[-3:] != self.grid_shape:
            raise ShapeError(f"expected grid features of shape {self.grid_shape}, got {fa.shape} and {fb.shape}")
        fused = ad.concat_channels(self.reduce_conv(fa), self.reduce_conv(fb))
        out = self.fuse_conv2(ad.relu(self.fuse_conv1(fused)))
        return out.reshape(*out.shape[:-3], *out.shape[-2:])

    def __call__(self, fa, fb) -> Tensor:
        """Batched (N, c, h, w) pairs to (N, h, w) attention; unbatched gives (h, w)."""
        z = self.logits(fa, fb)
        h, w = z.shape[-2:]
        if z.ndim == 2:
            return ad.softmax_flat(z)
        flat = z.reshape(z.shape[0], h * w)
        return ad.softmax(flat, axis=1).reshape(z.shape[0], h, w)

    def named_parameters(self):
        params = OrderedDict()
        params.update(collect("reduce_conv", self.reduce_conv))
        params.update(collect("fuse_conv1", self.fuse_conv1))
        params.update(collect("fuse_conv2", self.fuse_conv2))
        return params


def learned_attention(fa: GridFeature, fb: GridFeature, net: AttentionNet) -> AttentionMap:
    return AttentionMap("learned", net(fa.values, fb.values).data.copy())
