"""Parameter containers for convolution and dense layers."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Anything exposing named parameters in a stable order."""

    def named_parameters(self) -> "OrderedDict[str, Parameter]":
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(glorot_uniform((c_out, c_in, k, k), c_in * k * k, c_out * k * k, rng))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self):
        return OrderedDict(weight=self.weight, bias=self.bias)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(glorot_uniform((d_in, d_out), d_in, d_out, rng))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias

    def named_parameters(self):
        return OrderedDict(weight=self.weight, bias=self.bias)


def collect(prefix: str, module: Module) -> "OrderedDict[str, Parameter]":
    return OrderedDict((f"{prefix}.{name}", p) for name, p in module.named_parameters().items())
