"""Vanilla Transformer, Luna and ConvLuna encoders on a small numpy autodiff engine."""

from .attention import AttentionSpec, FilterSpec, multi_head_attention, rescaled_attention, filter_op
from .blocks import LunaState, Model, assemble_model
from .config import ExperimentConfig, ModelConfig, TaskSpec, TrainConfig
from .tensor import Tensor, backward, count_flops, no_grad, precision

__all__ = [
    "AttentionSpec",
    "ExperimentConfig",
    "FilterSpec",
    "LunaState",
    "Model",
    "ModelConfig",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "assemble_model",
    "backward",
    "count_flops",
    "filter_op",
    "multi_head_attention",
    "no_grad",
    "precision",
    "rescaled_attention",
]
