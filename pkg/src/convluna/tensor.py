"""Dense tensors with dynamic reverse-mode differentiation.

Every differentiable operation builds a node holding its parents and a closure
that maps the output gradient to one gradient per parent.  The graph is
rebuilt on every forward pass; :func:`backward` walks it in reverse
topological order.

Precision is a run-level setting: ``"standard"`` (float32) for training and
``"high"`` (float64) for gradient checks.  Tensors are created in whatever
precision is active at construction time.
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, NumericError, UsageError

PRECISIONS = {"standard": np.float32, "high": np.float64}

_precision = "standard"
_grad_enabled = True


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return PRECISIONS[_precision]


def set_precision(name: str) -> None:
    global _precision
    if name not in PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    _precision = name


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the precision used for newly created tensors."""
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


class FlopCounter:
    """Multiply-add counts accumulated per named layer scope."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, scope: str, n: int) -> None:
        self.counts[scope] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def matching(self, suffix: str) -> int:
        """Sum over scopes whose name ends with ``suffix``."""
        return sum(v for k, v in self.counts.items() if k.endswith(suffix))

    def reset(self) -> None:
        self.counts.clear()

    def __repr__(self) -> str:
        return f"FlopCounter(total={self.total}, scopes={len(self.counts)})"


_counters: list[FlopCounter] = []
_scopes: list[str] = []


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextlib.contextmanager
def flop_scope(name: str) -> Iterator[None]:
    _scopes.append(name)
    try:
        yield
    finally:
        _scopes.pop()


def current_scope() -> str:
    return ".".join(_scopes) or "<root>"


def record_flops(n: int) -> None:
    if _counters:
        scope = current_scope()
        for counter in _counters:
            counter.add(scope, n)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires grad and feeds ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Element-wise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), fn)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def where(mask, x: Tensor, fill: float) -> Tensor:
    """Keep ``x`` where ``mask`` is true, replace the rest with a constant."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.data, np.asarray(fill, dtype=x.dtype))

    def fn(g):
        return (_unbroadcast(np.where(mask, g, 0.0).astype(g.dtype, copy=False), x.shape),)

    return _node(out, (x,), fn)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _node(out, (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, index) -> Tensor:
    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; records m*n*k per matrix."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    record_flops(out.size * a.shape[-1])

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), fn)


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------


def _check_finite_or_masked(x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise NumericError("NaN encountered in softmax input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; ``-inf`` entries receive probability zero."""
    _check_finite_or_masked(x.data)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite_or_masked(x.data)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _node(out, (x,), fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _node(weight.data[ids], (weight,), fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Length-wise filtering (axis -2 is the sequence axis, axis -1 the channels)
# ---------------------------------------------------------------------------


def same_coverage_padding(length: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(left, right, out_length)`` for the same-coverage policy."""
    if kernel < 1 or stride < 1:
        raise ConfigError(f"kernel and stride must be >= 1, got kernel={kernel}, stride={stride}")
    out_len = -(-length // stride)
    pad = max(0, (out_len - 1) * stride + kernel - length)
    left = pad // 2
    return left, pad - left, out_len


def _pad_length(data: np.ndarray, left: int, right: int, value: float) -> np.ndarray:
    widths = [(0, 0)] * data.ndim
    widths[-2] = (left, right)
    return np.pad(data, widths, constant_values=value)


def _window(arr: np.ndarray, k: int, stride: int, out_len: int) -> tuple:
    """Index selecting tap ``k`` of every window along axis -2."""
    return (..., slice(k, k + (out_len - 1) * stride + 1, stride), slice(None))


def max_pool1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Sliding max per channel with ``-inf`` padding.

    The gradient of each window goes to its first maximal element.
    """
    left, right, out_len = same_coverage_padding(x.shape[-2], kernel, stride)
    padded = _pad_length(x.data, left, right, -np.inf)
    best = padded[_window(padded, 0, stride, out_len)].copy()
    for k in range(1, kernel):
        np.maximum(best, padded[_window(padded, k, stride, out_len)], out=best)

    def fn(g):
        gpad = np.zeros(padded.shape, dtype=g.dtype)
        taken = np.zeros(best.shape, dtype=bool)
        for k in range(kernel):
            hit = padded[_window(padded, k, stride, out_len)] == best
            hit &= ~taken
            taken |= hit
            gpad[_window(gpad, k, stride, out_len)] += g * hit
        return (gpad[..., left : left + x.shape[-2], :],)

    return _node(best, (x,), fn)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    """Per-channel convolution along the length axis with zero padding.

    ``weight`` has shape ``(kernel, channels)``: one length-``kernel`` filter per
    channel, no cross-channel terms.
    """
    kernel, channels = weight.shape
    if x.shape[-1] != channels:
        raise ConfigError(f"conv channels {channels} do not match input width {x.shape[-1]}")
    left, right, out_len = same_coverage_padding(x.shape[-2], kernel, stride)
    padded = _pad_length(x.data, left, right, 0.0)
    out = np.zeros(x.shape[:-2] + (out_len, channels), dtype=x.dtype)
    for k in range(kernel):
        out += padded[_window(padded, k, stride, out_len)] * weight.data[k]
    if bias is not None:
        out += bias.data
    record_flops(out.size * kernel)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gx = gw = None
        if x.requires_grad:
            gpad = np.zeros(padded.shape, dtype=g.dtype)
            for k in range(kernel):
                gpad[_window(gpad, k, stride, out_len)] += g * weight.data[k]
            gx = gpad[..., left : left + x.shape[-2], :]
        if weight.requires_grad:
            flat_g = g.reshape(-1, channels)
            gw = np.stack(
                [(padded[_window(padded, k, stride, out_len)].reshape(-1, channels) * flat_g).sum(axis=0) for k in range(kernel)]
            )
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, channels).sum(axis=0) if bias.requires_grad else None)
        return grads

    return _node(out, parents, fn)
