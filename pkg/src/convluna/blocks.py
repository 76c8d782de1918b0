"""Vanilla, Luna and ConvLuna encoder blocks and the classifier model around them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionProjections, AttentionSpec, FilterSpec, MultiHeadAttention, RescaledAttention
from .config import ModelConfig
from .errors import InputError
from .nn import NORMAL, Dropout, LayerNorm, Linear, Module, Parameter, RngHolder
from .tensor import Tensor


@dataclass
class LunaState:
    """Sequence activations ``x`` (..., L, d) and memory activations ``p`` (..., M, d)."""

    x: Tensor
    p: Tensor


class FeedForward(Module):
    def __init__(self, d: int, mlp_dim: int, dropout: float, rng: RngHolder) -> None:
        self.fc1 = Linear(d, mlp_dim)
        self.fc2 = Linear(mlp_dim, d)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        with T.flop_scope("ffn"):
            return self.fc2(self.drop(T.gelu(self.fc1(x))))


class VanillaBlock(Module):
    """Pre-norm block: ``I = X + MHA(LN(X))``, ``X' = I + FFN(LN(I))``."""

    def __init__(self, d: int, h: int, mlp_dim: int, dropout: float = 0.0, rng: RngHolder | None = None) -> None:
        rng = rng or RngHolder()
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(AttentionSpec(d, h))
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, mlp_dim, dropout, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        xn = self.norm_attn(x)
        with T.flop_scope("attn"):
            i = x + self.drop(self.attn(xn, xn, xn, key_mask=mask))
        return i + self.ffn(self.norm_ffn(i))


class LunaBlock(Module):
    """Post-norm Luna block; with ``rescaled=True`` the packing attention is the ConvLuna one.

    ``P_packed = Pack(P, X, X)``, ``X_unpacked = MHA(X, P_packed, P_packed)``,
    ``I = LN(X + X_unpacked)``, ``P' = LN(P + P_packed)``, ``X' = LN(FFN(I) + I)``.
    """

    def __init__(
        self,
        d: int,
        h: int,
        mlp_dim: int,
        dropout: float = 0.0,
        rng: RngHolder | None = None,
        *,
        rescaled: bool = False,
        filt: FilterSpec | None = None,
        temperature_mode: str = "fixed-sqrt",
        share_projections: bool = False,
        value_projection: str = "learned",
    ) -> None:
        rng = rng or RngHolder()
        filt = filt or FilterSpec()
        spec = AttentionSpec(d, h, value_projection=value_projection)
        pack_proj = AttentionProjections(spec)
        unpack_proj = pack_proj if share_projections else AttentionProjections(spec)
        if rescaled:
            pack_spec = AttentionSpec(
                d, h, temperature_mode=temperature_mode, value_projection=value_projection,
                share_kv_projection_with="unpack" if share_projections else None,
            )
            self.pack = RescaledAttention(pack_spec, filt, pack_proj, owner="pack")
        else:
            self.pack = MultiHeadAttention(spec, pack_proj)
        self.unpack = MultiHeadAttention(spec, unpack_proj)
        self.norm_x = LayerNorm(d)
        self.norm_p = LayerNorm(d)
        self.norm_out = LayerNorm(d)
        self.ffn = FeedForward(d, mlp_dim, dropout, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, state: LunaState, mask=None) -> LunaState:
        x, p = state.x, state.p
        with T.flop_scope("pack"):
            packed = self.drop(self.pack(p, x, x, key_mask=mask))
        with T.flop_scope("unpack"):
            unpacked = self.drop(self.unpack(x, packed, packed))
        i = self.norm_x(x + unpacked)
        p_next = self.norm_p(p + packed)
        x_next = self.norm_out(self.ffn(i) + i)
        return LunaState(x_next, p_next)


def luna_block(d: int, h: int, mlp_dim: int, dropout: float = 0.0, rng: RngHolder | None = None) -> LunaBlock:
    return LunaBlock(d, h, mlp_dim, dropout, rng)


def convluna_block(
    d: int,
    h: int,
    mlp_dim: int,
    filt: FilterSpec,
    dropout: float = 0.0,
    rng: RngHolder | None = None,
    *,
    temperature_mode: str = "learnable-exp-tau",
    share_projections: bool = True,
    value_projection: str = "identity",
) -> LunaBlock:
    return LunaBlock(
        d, h, mlp_dim, dropout, rng, rescaled=True, filt=filt, temperature_mode=temperature_mode,
        share_projections=share_projections, value_projection=value_projection,
    )


class Model(Module):
    """Embeddings, a stack of encoder blocks, pooling and a linear classifier."""

    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        self.cfg = cfg
        self.rng = RngHolder(seed)
        d = cfg.d
        self.token_embedding = Parameter((cfg.vocab_size, d), NORMAL)
        self.position_embedding = Parameter((cfg.max_len, d), NORMAL)
        self.memory = Parameter((cfg.memory_size, d), NORMAL) if cfg.has_memory else None
        self.embed_drop = Dropout(cfg.dropout, self.rng)
        if cfg.arch == "vanilla":
            self.blocks = [VanillaBlock(d, cfg.h, cfg.mlp_dim, cfg.dropout, self.rng) for _ in range(cfg.blocks)]
        else:
            self.blocks = [
                LunaBlock(
                    d, cfg.h, cfg.mlp_dim, cfg.dropout, self.rng,
                    rescaled=cfg.rescaled,
                    filt=cfg.filter if cfg.rescaled else FilterSpec(),
                    temperature_mode=cfg.temperature_mode,
                    share_projections=cfg.effective_share,
                    value_projection=cfg.effective_value_projection,
                )
                for _ in range(cfg.blocks)
            ]
        self.classifier = Linear(d * (2 if cfg.dual_input else 1), cfg.num_classes)
        self.reset_parameters(seed)

    def taus(self) -> dict[str, float]:
        return {
            name: float(p.data)
            for name, p in self.named_parameters()
            if name.endswith(".tau")
        }

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[-1] > self.cfg.max_len:
            raise InputError(f"sequence length {ids.shape[-1]} exceeds max_len {self.cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise InputError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        return ids.astype(np.int64)

    def encode(self, ids, mask=None) -> Tensor:
        """Pooled ``(B, d)`` representation of a batch of token sequences."""
        ids = self._check_ids(ids)
        length = ids.shape[-1]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(ids.shape)
        x = T.embedding(self.token_embedding, ids) + self.position_embedding[:length]
        x = self.embed_drop(x)
        if self.cfg.arch == "vanilla":
            for i, block in enumerate(self.blocks):
                with T.flop_scope(f"block{i}"):
                    x = block(x, mask)
            return self._pool_tokens(x, mask)
        state = LunaState(x, self.memory)
        for i, block in enumerate(self.blocks):
            with T.flop_scope(f"block{i}"):
                state = block(state, mask)
        if self.cfg.effective_pooling == "memory-average":
            p = state.p
            if p.ndim == 2:
                p = p.reshape(1, *p.shape)
            return p.mean(axis=-2)
        return self._pool_tokens(state.x, mask)

    def _pool_tokens(self, x: Tensor, mask) -> Tensor:
        if self.cfg.effective_pooling == "cls":
            return x[:, 0]
        if mask is None:
            return x.mean(axis=-2)
        weights = mask.astype(x.dtype)[..., None]
        counts = np.maximum(weights.sum(axis=-2), 1.0)
        return (x * weights).sum(axis=-2) / counts

    def forward(self, ids, mask=None, ids_b=None, mask_b=None) -> Tensor:
        rep = self.encode(ids, mask)
        if self.cfg.dual_input:
            if ids_b is None:
                raise InputError("dual-input model needs a second sequence")
            rep = T.concat([rep, self.encode(ids_b, mask_b)], axis=-1)
        with T.flop_scope("classifier"):
            return self.classifier(rep)


def assemble_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)
