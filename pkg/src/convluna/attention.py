"""Multi-head attention, the rescaled/filtered packing attention, and FilterOp.

Inputs are ``(..., L, d)`` tensors; leading axes are batch axes.  Key masks are
boolean arrays of shape ``(..., L_k)`` where ``True`` marks a valid position.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import ZEROS, Init, Linear, Module, Parameter
from .tensor import Tensor

TEMPERATURE_MODES = ("fixed-sqrt", "learnable-exp-tau")
VALUE_PROJECTIONS = ("learned", "identity")
FILTER_KINDS = ("identity", "conv", "maxpool")


@dataclass(frozen=True)
class AttentionSpec:
    d: int
    h: int
    temperature_mode: str = "fixed-sqrt"
    value_projection: str = "learned"
    share_kv_projection_with: str | None = None

    def __post_init__(self) -> None:
        if self.d < 1 or self.h < 1 or self.d % self.h:
            raise ConfigError(f"model width d={self.d} must be a positive multiple of heads h={self.h}")
        if self.temperature_mode not in TEMPERATURE_MODES:
            raise ConfigError(f"temperature_mode must be one of {TEMPERATURE_MODES}, got {self.temperature_mode!r}")
        if self.value_projection not in VALUE_PROJECTIONS:
            raise ConfigError(f"value_projection must be one of {VALUE_PROJECTIONS}, got {self.value_projection!r}")

    @property
    def d_h(self) -> int:
        return self.d // self.h


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "identity"
    kernel: int = 1
    stride: int = 1
    padding_policy: str = field(default="same-coverage")

    def __post_init__(self) -> None:
        if self.kind not in FILTER_KINDS:
            raise ConfigError(f"filter kind must be one of {FILTER_KINDS}, got {self.kind!r}")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"filter kernel and stride must be >= 1, got K={self.kernel}, S={self.stride}")
        if self.padding_policy != "same-coverage":
            raise ConfigError(f"unsupported padding policy {self.padding_policy!r}")

    def output_length(self, length: int) -> int:
        if self.kind == "identity":
            return length
        return T.same_coverage_padding(length, self.kernel, self.stride)[2]


class TauParameter(Parameter):
    """Log-temperature of one packing attention; ``exp(tau)`` divides the logits."""

    __slots__ = ("owner",)

    def __init__(self, owner: str = "") -> None:
        super().__init__((), ZEROS, decay=False)
        self.owner = owner


# ---------------------------------------------------------------------------
# Score probes (allocation / entropy inspection)
# ---------------------------------------------------------------------------


class ScoreProbe:
    """Records every attention probability matrix produced while active."""

    def __init__(self, keep_scores: bool) -> None:
        self.keep_scores = keep_scores
        self.records: list[tuple[str, tuple[int, int], np.ndarray | None]] = []

    @property
    def largest(self) -> tuple[int, int]:
        return max((shape for _, shape, _ in self.records), key=lambda s: s[0] * s[1])

    def scores(self, scope_suffix: str) -> list[np.ndarray]:
        return [p for scope, _, p in self.records if scope.endswith(scope_suffix) and p is not None]


_probes: list[ScoreProbe] = []


@contextlib.contextmanager
def score_probe(keep_scores: bool = False) -> Iterator[ScoreProbe]:
    probe = ScoreProbe(keep_scores)
    _probes.append(probe)
    try:
        yield probe
    finally:
        _probes.remove(probe)


# ---------------------------------------------------------------------------
# Functional core
# ---------------------------------------------------------------------------


def split_heads(x: Tensor, h: int) -> Tensor:
    *lead, length, d = x.shape
    return x.reshape(*lead, length, h, d // h).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, length, d_h = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, h * d_h)


def attend(q: Tensor, k: Tensor, v: Tensor, h: int, divisor, key_mask=None) -> Tensor:
    """Per-head ``softmax(q k^T / divisor) v`` on already projected inputs."""
    qh, kh, vh = split_heads(q, h), split_heads(k, h), split_heads(v, h)
    with T.flop_scope("scores"):
        logits = T.matmul(qh, kh.swapaxes(-1, -2)) / divisor
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)
        logits = T.where(mask[..., None, None, :], logits, -np.inf)
    probs = T.softmax(logits, axis=-1)
    if _probes:
        scope = T.current_scope()
        shape = probs.shape[-2:]
        for probe in _probes:
            probe.records.append((scope, shape, probs.data.copy() if probe.keep_scores else None))
    with T.flop_scope("mix"):
        ctx = T.matmul(probs, vh)
    return merge_heads(ctx)


def filter_mask(mask, spec: FilterSpec) -> np.ndarray | None:
    """Validity of each filtered position.

    Output ``i`` is valid when its stride cell ``[i*S, (i+1)*S)`` holds a valid
    input and its window covers one.  With ``S=1`` this is just ``mask``, so
    trailing padding never adds keys.
    """
    if mask is None or spec.kind == "identity":
        return mask
    mask = np.asarray(mask, dtype=bool)
    length = mask.shape[-1]
    left, right, out_len = T.same_coverage_padding(length, spec.kernel, spec.stride)
    widths = [(0, 0)] * (mask.ndim - 1) + [(left, right)]
    padded = np.pad(mask, widths, constant_values=False)
    window = np.zeros(mask.shape[:-1] + (out_len,), dtype=bool)
    for k in range(spec.kernel):
        window |= padded[..., k : k + (out_len - 1) * spec.stride + 1 : spec.stride]
    cells = np.pad(mask, [(0, 0)] * (mask.ndim - 1) + [(0, out_len * spec.stride - length)])
    cell = cells.reshape(mask.shape[:-1] + (out_len, spec.stride)).any(axis=-1)
    return window & cell


def filter_op(x: Tensor, spec: FilterSpec, kernel: Tensor | None = None, bias: Tensor | None = None, mask=None) -> Tensor:
    """Length-wise max-pooling or depthwise convolution of ``(..., L, d)`` inputs.

    Masked (invalid) positions never leak into valid outputs: they are treated
    as padding, and outputs whose window holds no valid input are zeroed.
    """
    if spec.kind == "identity":
        return x
    if x.shape[-2] < 1:
        raise ConfigError("filter_op needs a sequence of length >= 1")
    valid = None if mask is None else np.asarray(mask, dtype=bool)[..., None]
    if spec.kind == "maxpool":
        if valid is not None:
            x = T.where(valid, x, -np.inf)
        out = T.max_pool1d(x, spec.kernel, spec.stride)
    else:
        if kernel is None:
            raise ConfigError("conv filter needs a kernel parameter")
        if kernel.shape[0] != spec.kernel:
            raise ConfigError(f"conv kernel length {kernel.shape[0]} != spec kernel {spec.kernel}")
        if valid is not None:
            x = T.where(valid, x, 0.0)
        out = T.depthwise_conv1d(x, kernel, bias, spec.stride)
    if valid is not None:
        out = T.where(filter_mask(mask, spec)[..., None], out, 0.0)
    return out


def _check_widths(spec: AttentionSpec, *xs: Tensor) -> None:
    for x in xs:
        if x.shape[-1] != spec.d:
            raise ConfigError(f"attention width mismatch: input width {x.shape[-1]} != d={spec.d}")
        if x.shape[-2] < 1:
            raise ConfigError("attention inputs need at least one position")


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, proj: "AttentionProjections", spec: AttentionSpec, key_mask=None) -> Tensor:
    """Standard multi-head attention with the fixed ``sqrt(d_h)`` divisor."""
    _check_widths(spec, query, key, value)
    q, k, v = proj.project(query, key, value)
    ctx = attend(q, k, v, spec.h, math.sqrt(spec.d_h), key_mask)
    return proj.output(ctx)


def rescaled_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    proj: "AttentionProjections",
    spec: AttentionSpec,
    filt: FilterSpec,
    tau: Tensor | None,
    key_filter: "FilterOp | None" = None,
    value_filter: "FilterOp | None" = None,
    key_mask=None,
) -> Tensor:
    """Packing attention: FilterOp on projected keys/values, logits divided by ``exp(tau)``.

    With ``tau=None`` the divisor stays at ``sqrt(d_h)`` (filtering-only variant).
    """
    _check_widths(spec, query, key, value)
    q, k, v = proj.project(query, key, value)
    with T.flop_scope("filter"):
        if key_filter is not None:
            k = key_filter(k, key_mask)
            v = value_filter(v, key_mask)
        else:
            k = filter_op(k, filt, mask=key_mask)
            v = filter_op(v, filt, mask=key_mask)
    mask = filter_mask(key_mask, filt)
    divisor = T.exp(tau) if tau is not None else math.sqrt(spec.d_h)
    ctx = attend(q, k, v, spec.h, divisor, mask)
    return proj.output(ctx)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class AttentionProjections(Module):
    """``W^Q``, ``W^K``, optional ``W^V`` and ``W^O`` (with biases)."""

    def __init__(self, spec: AttentionSpec) -> None:
        self.query = Linear(spec.d, spec.d)
        self.key = Linear(spec.d, spec.d)
        self.value = Linear(spec.d, spec.d) if spec.value_projection == "learned" else None
        self.output = Linear(spec.d, spec.d)

    def project(self, query: Tensor, key: Tensor, value: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        with T.flop_scope("proj"):
            q = self.query(query)
            k = self.key(key)
            v = self.value(value) if self.value is not None else value
        return q, k, v


class FilterOp(Module):
    def __init__(self, spec: FilterSpec, d: int) -> None:
        self.spec = spec
        self.kernel = self.bias = None
        if spec.kind == "conv":
            self.kernel = Parameter((spec.kernel, d), Init("fan_uniform", fan_in=spec.kernel, fan_out=spec.kernel))
            self.bias = Parameter((d,), ZEROS, decay=False)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        return filter_op(x, self.spec, self.kernel, self.bias, mask)


class MultiHeadAttention(Module):
    def __init__(self, spec: AttentionSpec, projections: AttentionProjections | None = None) -> None:
        self.spec = spec
        self.proj = projections if projections is not None else AttentionProjections(spec)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_mask=None) -> Tensor:
        return multi_head_attention(query, key, value, self.proj, self.spec, key_mask)


class RescaledAttention(Module):
    """Packing attention with FilterOp on keys/values and an optional learnable ``tau``.

    Key and value paths get independent conv kernels when the filter is a
    convolution.
    """

    def __init__(self, spec: AttentionSpec, filt: FilterSpec, projections: AttentionProjections | None = None, owner: str = "") -> None:
        self.spec = spec
        self.filt = filt
        self.proj = projections if projections is not None else AttentionProjections(spec)
        self.key_filter = FilterOp(filt, spec.d)
        self.value_filter = FilterOp(filt, spec.d)
        self.tau = TauParameter(owner) if spec.temperature_mode == "learnable-exp-tau" else None

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_mask=None) -> Tensor:
        return rescaled_attention(
            query, key, value, self.proj, self.spec, self.filt, self.tau,
            key_filter=self.key_filter, value_filter=self.value_filter, key_mask=key_mask,
        )
