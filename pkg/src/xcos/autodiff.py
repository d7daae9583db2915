"""Dense float64 tensors with reverse-mode differentiation.

The graph is recorded implicitly: every op that touches a tensor requiring
gradients keeps references to its inputs and a closure mapping the upstream
gradient to input gradients. :func:`backward` walks that record once in
reverse topological order and accumulates into :class:`Parameter` gradients.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-12
# exp(-700) ~ 1e-304 stays a positive normal float
SOFTMAX_FLOOR = -700.0

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array node in the computation record."""

    __slots__ = ("data", "_parents", "_backward", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, _parents: tuple = (), _backward: BackwardFn | None = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self._parents = _parents
        self._backward = _backward
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf; ``grad`` always has the shape of ``data``."""

    __slots__ = ("grad",)

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents, fn, requires_grad=True)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def arccos(x: Tensor) -> Tensor:
    return _make(np.arccos(x.data), (x,),
                 lambda g: (-g / np.sqrt(1.0 - x.data ** 2),))


def cos(x: Tensor) -> Tensor:
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


# reductions and shape ops

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s. Accepts (C,H,W) or (N,C,H,W)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError(f"concat_channels needs matching 3-D or 4-D inputs, got {a.shape}, {b.shape}")
    axis = a.ndim - 3
    if a.shape[axis] < 1 or b.shape[axis] < 1:
        raise ShapeError("concat_channels needs at least one channel per input")
    if a.shape[:axis] != b.shape[:axis] or a.shape[axis + 1:] != b.shape[axis + 1:]:
        raise ShapeError(f"spatial/batch mismatch: {a.shape} vs {b.shape}")
    return concat([a, b], axis=axis)


# normalisation

def l2_normalize(v: Tensor, axis: int = -1, epsilon: float = EPS) -> Tensor:
    """``v / max(||v||, epsilon)`` along ``axis``.

    Inside the guard (norm below epsilon) no gradient flows: the exact
    derivative there is 1/epsilon, which would swamp every other term.
    """
    v = as_tensor(v)
    norm = np.sqrt((v.data ** 2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, epsilon)
    out = v.data / denom
    guarded = norm < epsilon

    def fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gv = (g - out * dot) / denom
        return (np.where(guarded, 0.0, gv),)

    return _make(out, (v,), fn)


def cosine(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; a zero operand yields 0."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine needs equal shapes, got {u.shape} and {v.shape}")
    return tsum(l2_normalize(u, axis) * l2_normalize(v, axis), axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; shifted logits are floored so no output underflows to 0."""
    x = as_tensor(x)
    z = np.exp(np.maximum(x.data - x.data.max(axis=axis, keepdims=True), SOFTMAX_FLOOR))
    out = z / z.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), fn)


def softmax_flat(x: Tensor) -> Tensor:
    """Softmax over every entry of ``x`` (shape preserved)."""
    x = as_tensor(x)
    return reshape(softmax(reshape(x, (-1,))), x.shape)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)

    def fn(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), fn)


# convolution

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernel`` is (C_out, C_in, kH, kW).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects input (N,C,H,W)/(C,H,W) and 4-D kernel, got {x.shape}, {kernel.shape}")
    n, c_in, h, w = xd.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in} channels, kernel expects {k_in}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (n, c_in, ho, wo, kh, kw)
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, c_out)
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out[0] if single else out)

    def fn(g):
        g4 = g[None] if single else g
        gk = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3])) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g4, kernel.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = gx[0] if single else gx
        grads = [gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, fn)


# reverse pass

def _topological(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(param) into every reachable ``Parameter.grad``."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(_topological(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """Plain SGD: ``value -= lr * grad`` and then clear the gradient."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.data = p.data - lr * p.grad
        p.zero_grad()


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild its graph from the current parameter values on every
    call. Parameter gradients are cleared before and after.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    zero_grad(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]
    zero_grad(params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.flat
        for k in range(p.size):
            orig = flat[k]
            hi, lo = orig + eps, orig - eps
            flat[k] = hi
            up = f().item()
            flat[k] = lo
            down = f().item()
            flat[k] = orig
            # divide by the step actually taken, not the nominal 2*eps
            numeric = (up - down) / (hi - lo)
            ak = a.reshape(-1)[k]
            err = abs(ak - numeric) / max(abs(ak), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
