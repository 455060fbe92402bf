"""Finite-difference gradient checking used across the test modules."""
from __future__ import annotations

import numpy as np

from sarcd.tensor import Tensor, backward, tsum


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def check_grad(fn, arrays, h=1e-5, seed=0) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps a list of Tensors to one Tensor. The scalar being
    differentiated is sum(fn(...) * R) for a fixed random R, so every output
    element contributes.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(tensors)
    weights = rng.standard_normal(out.shape)

    def scalar(ts):
        o = fn(ts)
        return tsum(o * weights) if o.ndim else o * float(weights)

    backward(scalar(tensors))
    worst = 0.0
    for t in tensors:
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = scalar(tensors).item()
            flat[i] = old - h
            down = scalar(tensors).item()
            flat[i] = old
            nflat[i] = (up - down) / (2 * h)
        worst = max(worst, rel_error(t.grad, num))
    return worst
