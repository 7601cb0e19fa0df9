"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-relative error; gradients smaller than ``floor`` are compared absolutely."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d t by central differences; ``t.data`` is perturbed in place."""
    t.data = np.ascontiguousarray(t.data)
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(fn().data)
        flat[i] = orig - h
        minus = float(fn().data)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5
) -> list[float]:
    """Relative error between analytic and numeric gradients for each input.

    ``fn`` must rebuild the graph from ``inputs`` on every call and return a
    scalar tensor.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    return [relative_error(a, numeric_gradient(fn, t, h)) for a, t in zip(analytic, inputs)]


def projected(out: Tensor, seed: int = 0) -> Tensor:
    """Reduce a tensor to a scalar with a fixed random projection."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(r.astype(out.dtype))).sum()
