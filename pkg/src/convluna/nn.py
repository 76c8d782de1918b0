"""Parameters, a small module system, and the basic layers built on it."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class Init:
    """Named initializer.

    ``fan_uniform`` draws from U(-a, a) with ``a = sqrt(6 / (fan_in + fan_out))``;
    ``normal`` uses ``std``; ``constant`` fills with ``value``.
    """

    kind: str
    fan_in: int = 0
    fan_out: int = 0
    std: float = 0.02
    value: float = 0.0

    def sample(self, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
        if self.kind == "fan_uniform":
            limit = np.sqrt(6.0 / (self.fan_in + self.fan_out))
            return rng.uniform(-limit, limit, size=shape)
        if self.kind == "normal":
            return rng.normal(0.0, self.std, size=shape)
        if self.kind == "constant":
            return np.full(shape, self.value)
        raise ConfigError(f"unknown initializer {self.kind!r}")


ZEROS = Init("constant", value=0.0)
ONES = Init("constant", value=1.0)
NORMAL = Init("normal", std=0.02)


class Parameter(Tensor):
    """A trainable tensor with a registry name and an initializer."""

    __slots__ = ("name", "init", "decay")

    def __init__(self, shape, init: Init, decay: bool = True) -> None:
        super().__init__(np.zeros(shape), requires_grad=True)
        self.name = ""
        self.init = init
        self.decay = decay

    def reset(self, seed: int) -> None:
        rng = np.random.default_rng([seed, zlib.crc32(self.name.encode())])
        self.data = self.init.sample(self.shape, rng).astype(self.dtype)
        self.grad = None


class Module:
    """Container that discovers parameters and sub-modules from its attributes."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        stack = [(prefix, self)]
        out = []
        while stack:
            path, module = stack.pop(0)
            for key, child in module._children():
                name = f"{path}{key}"
                if isinstance(child, Parameter):
                    if id(child) not in seen:
                        seen.add(id(child))
                        child.name = child.name or name
                        out.append((name, child))
                elif id(child) not in seen:
                    seen.add(id(child))
                    stack.append((name + ".", child))
        out.sort(key=lambda kv: kv[0])
        return iter(out)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def reset_parameters(self, seed: int) -> None:
        """(Re-)initialise every parameter; identical seeds give identical weights."""
        for name, param in self.named_parameters():
            param.name = name
            param.reset(seed)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ConfigError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """``x @ W + b`` with ``W`` of shape ``(d_in, d_out)``."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True) -> None:
        self.weight = Parameter((d_in, d_out), Init("fan_uniform", fan_in=d_in, fan_out=d_out))
        self.bias = Parameter((d_out,), ZEROS, decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5) -> None:
        self.gamma = Parameter((d,), ONES, decay=False)
        self.beta = Parameter((d,), ZEROS, decay=False)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    """Inverted dropout driven by a generator shared across the model."""

    def __init__(self, rate: float, rng_holder: "RngHolder") -> None:
        self.rate = rate
        self.rng_holder = rng_holder

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, self.rng_holder.rng, self.training)


class RngHolder:
    """Mutable box so every dropout site draws from one reseedable stream."""

    def __init__(self, seed: int = 0) -> None:
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)
