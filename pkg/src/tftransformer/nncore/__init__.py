"""Minimal differentiable operator set: tensors, layers, Adam, checkpoints."""

from . import functional
from .checkpoint import Checkpoint, FormatError, load_checkpoint, save_checkpoint
from .layers import (
    AttentionSpec,
    BatchNorm2d,
    Conv2d,
    ConvSpec,
    EncoderLayer,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
)
from .optim import Adam, AdamState, adam_step
from .tensor import NumericError, ShapeError, Tensor, concat, debug_numerics, matmul, no_grad, tensor

__all__ = [
    "Adam",
    "AdamState",
    "AttentionSpec",
    "BatchNorm2d",
    "Checkpoint",
    "Conv2d",
    "ConvSpec",
    "EncoderLayer",
    "FeedForward",
    "FormatError",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "NumericError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "adam_step",
    "concat",
    "debug_numerics",
    "functional",
    "load_checkpoint",
    "matmul",
    "no_grad",
    "save_checkpoint",
    "tensor",
]
