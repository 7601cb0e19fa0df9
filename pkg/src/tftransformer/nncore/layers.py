"""Parameter containers and the layers used by the model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """A named model tensor.  Only trainable parameters receive gradients."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]

    def __post_init__(self):
        if self.out_channels < 1 or min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid conv spec {self}")

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        return (
            F.conv_output_size(h, self.kernel[0], self.stride[0], self.padding[0]),
            F.conv_output_size(w, self.kernel[1], self.stride[1], self.padding[1]),
        )


@dataclass(frozen=True)
class AttentionSpec:
    embed_dim: int
    n_heads: int
    ff_dim: int

    def __post_init__(self):
        if self.embed_dim < 1 or self.n_heads < 1 or self.ff_dim < 1:
            raise ValueError(f"invalid attention spec {self}")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + attr + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.trainable]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_channels: int, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = in_channels * kh * kw
        self.weight = Parameter(_uniform(rng, (spec.out_channels, in_channels, kh, kw), fan_in, dtype))
        self.bias = Parameter(_uniform(rng, (spec.out_channels,), fan_in, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Parameter(np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = Parameter(np.ones(channels, dtype=dtype), trainable=False)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean.data,
            self.running_var.data,
            self.training,
            self.momentum,
            self.eps,
        )


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = Parameter(_uniform(rng, (n_out, n_in), n_in, dtype))
        self.bias = Parameter(_uniform(rng, (n_out,), n_in, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, embed_dim: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if embed_dim % n_heads:
            raise ValueError(f"embed_dim {embed_dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.q_proj = Linear(embed_dim, embed_dim, rng, dtype)
        self.k_proj = Linear(embed_dim, embed_dim, rng, dtype)
        self.v_proj = Linear(embed_dim, embed_dim, rng, dtype)
        self.out_proj = Linear(embed_dim, embed_dim, rng, dtype)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, np.ndarray]:
        return F.multi_head_attention(
            q,
            k,
            v,
            self.n_heads,
            self.q_proj.weight,
            self.q_proj.bias,
            self.k_proj.weight,
            self.k_proj.bias,
            self.v_proj.weight,
            self.v_proj.bias,
            self.out_proj.weight,
            self.out_proj.bias,
        )


class FeedForward(Module):
    def __init__(self, embed_dim: int, ff_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(embed_dim, ff_dim, rng, dtype)
        self.fc2 = Linear(ff_dim, embed_dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.feed_forward(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


class EncoderLayer(Module):
    """Post-norm Transformer encoder layer.

    ``forward(x)`` is self-attention with the residual on ``x``.
    ``forward(q, k, v)`` is the cross-attention variant whose residual
    attaches to ``v``.  Returns ``(out, hidden, attention)`` where ``hidden``
    is the LayerNorm output after the attention sub-layer.
    """

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator, dtype=np.float32, dropout: float = 0.0):
        self.attn = MultiHeadAttention(spec.embed_dim, spec.n_heads, rng, dtype)
        self.norm1 = LayerNorm(spec.embed_dim, dtype=dtype)
        self.ff = FeedForward(spec.embed_dim, spec.ff_dim, rng, dtype)
        self.norm2 = LayerNorm(spec.embed_dim, dtype=dtype)
        self.dropout = dropout
        self.rng: np.random.Generator | None = None

    def forward(self, q: Tensor, k: Tensor | None = None, v: Tensor | None = None):
        if k is None and v is None:
            k = v = q
        residual = v
        a, weights = self.attn(q, k, v)
        a = F.dropout(a, self.dropout, self.rng, self.training)
        h = self.norm1(a + residual)
        m = F.dropout(self.ff(h), self.dropout, self.rng, self.training)
        return self.norm2(m + h), h, weights
