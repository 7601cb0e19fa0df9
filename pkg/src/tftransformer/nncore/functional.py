"""Differentiable operators.

Heavy operators (convolution, the normalizations, softmax, pooling and the
loss) carry hand-written backward passes; attention and the feed-forward
block are compositions of the primitives so their gradients come from the
graph.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, matmul

ENERGY_FLOOR = 1e-10


def conv_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """2-D cross-correlation over NCHW input via im2col."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, cin, H, W = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    sh, sw = stride
    ph, pw = padding
    Ho = conv_output_size(H, kh, sh, ph)
    Wo = conv_output_size(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} does not fit padded input {(H + 2 * ph, W + 2 * pw)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = np.empty((b, cin, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw]
    cols = cols.reshape(b, cin * kh * kw, Ho * Wo)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, cout, Ho, Wo)

    def backward(g):
        g2 = g.reshape(b, cout, Ho * Wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2).reshape(b, cin, kh, kw, Ho, Wo)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + H, pw : pw + W]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running buffers are updated in place; the running
    variance uses the unbiased batch estimate.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects NCHW input, got {x.shape}")
    b, c, H, W = x.shape
    if b == 0:
        raise ValueError("batch_norm2d: empty batch")
    n = b * H * W
    axes = (0, 2, 3)
    if training:
        if n < 2:
            raise ValueError("batch_norm2d: training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (
                n * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            ) * (inv_std[None, :, None, None] / n)
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return Tensor.from_op(out, (x,), lambda g: (g * (out > 0),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``weight`` has shape (n_out, n_in)."""
    n_out, n_in = weight.shape
    if x.shape[-1] != n_in:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} != {n_in}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, n_out)
        x2 = x.data.reshape(-1, n_in)
        gx = g @ weight.data
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the population variance."""
    n = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = (
            n * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        ) * (inv_std / n)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor.from_op(out, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    out = Tensor.from_op(s, (x,), backward)
    out.meta["softmax_of"] = x
    return out


def cross_entropy(
    probs: Tensor,
    onehot: Tensor | np.ndarray,
    floor: float = ENERGY_FLOOR,
    sample_weights: np.ndarray | None = None,
) -> Tensor:
    """Mean negative log-likelihood of the true classes.

    When ``probs`` came straight out of :func:`softmax`, the gradient is
    routed to the logits as ``(probs - onehot) / b``.  Optional
    ``sample_weights`` scale each row's term.
    """
    z = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot)
    if z.shape != probs.shape or probs.ndim != 2:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs targets {z.shape}")
    if not (np.all((z == 0) | (z == 1)) and np.all(z.sum(axis=1) == 1)):
        raise ValueError("cross_entropy: targets must be one-hot rows")
    b = probs.shape[0]
    p = probs.data
    z = z.astype(p.dtype)
    w = np.ones((b, 1), dtype=p.dtype) if sample_weights is None else np.asarray(sample_weights, p.dtype)[:, None]
    clamped = np.maximum(p, floor)
    loss = np.asarray(-(w * z * np.log(clamped)).sum() / b, dtype=p.dtype)

    logits = probs.meta.get("softmax_of")
    if logits is not None:
        # d/d logits of -sum_j z_j log softmax_j = softmax * sum_j z_j - z
        return Tensor.from_op(loss, (logits,), lambda g: (g * w * (p - z) / b,))

    def backward(g):
        return (np.where(p > floor, -g * w * z / (b * clamped), 0).astype(p.dtype),)

    return Tensor.from_op(loss, (probs,), backward)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"channel_mean expects NCHW input, got {x.shape}")
    return x.mean(axis=1)


def mean_std_pool(y: Tensor) -> Tensor:
    """Pool (b, F, T) to (b, 2T): means over F followed by population stds over F."""
    if y.ndim != 3:
        raise ShapeError(f"mean_std_pool expects (b, F, T), got {y.shape}")
    F = y.shape[1]
    mean = y.data.mean(axis=1)
    centered = y.data - mean[:, None, :]
    std = np.sqrt((centered * centered).mean(axis=1))
    T = mean.shape[1]

    def backward(g):
        gm, gs = g[:, :T], g[:, T:]
        # d std / d y is undefined at std == 0; use 0 there
        safe = np.where(std > 0, std, 1)
        coef = np.where(std > 0, gs / (F * safe), 0)
        return ((gm / F)[:, None, :] + centered * coef[:, None, :],)

    return Tensor.from_op(np.concatenate([mean, std], axis=1), (y,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    b, L, e = t.shape
    return t.reshape(b, L, n_heads, e // n_heads).transpose(0, 2, 1, 3)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention with ``n_heads`` heads.

    Self-attention is the call with ``q is k is v``.  Returns the projected
    output (b, Lq, e) and the attention weights (b, heads, Lq, Lk).
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("multi_head_attention expects (b, L, e) inputs")
    b, Lq, e = q.shape
    if k.shape[-1] != e or v.shape[-1] != e or k.shape[:2] != v.shape[:2] or k.shape[0] != b:
        raise ShapeError(f"multi_head_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if e % n_heads:
        raise ShapeError(f"embed dim {e} not divisible by {n_heads} heads")
    head_dim = e // n_heads

    Q = _split_heads(linear(q, wq, bq), n_heads)
    K = _split_heads(linear(k, wk, bk), n_heads)
    V = _split_heads(linear(v, wv, bv), n_heads)
    scores = matmul(Q, K.swapaxes(-1, -2)) * (1.0 / math.sqrt(head_dim))
    attn = softmax(scores)
    ctx = matmul(attn, V).transpose(0, 2, 1, 3).reshape(b, Lq, e)
    return linear(ctx, wo, bo), attn.data


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(relu(linear(x, w1, b1)), w2, b2)


def sinusoidal_positions(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)
