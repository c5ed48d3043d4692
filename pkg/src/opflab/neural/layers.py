"""Elementary differentiable blocks with explicit forward/backward passes.

All blocks work on batches laid out as ``(batch, features)``.
"""
from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from opflab.errors import ShapeMismatch


def dense_forward(x, W, b=None):
    if x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"dense layer expects {W.shape[0]} inputs, got {x.shape[-1]}")
    out = x @ W
    if b is not None:
        out = out + b
    return out


def dense_backward(dout, x, W, has_bias: bool = True):
    """Gradients (dx, dW, db) for ``out = x @ W + b``."""
    dx = dout @ W.T
    dW = x.T @ dout
    db = dout.sum(axis=0) if has_bias else None
    return dx, dW, db


def relu(a):
    return np.maximum(a, 0.0)


def relu_backward(dout, a):
    return dout * (a > 0)


def tanh(a):
    return np.tanh(a)


def tanh_backward(dout, a):
    t = np.tanh(a)
    return dout * (1.0 - t * t)


def sigmoid(a):
    # split by sign to avoid overflow in exp
    out = np.empty_like(a, dtype=float)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


ACTIVATIONS = {"relu": (relu, relu_backward), "tanh": (tanh, tanh_backward)}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def param_count(model) -> int:
    """Number of trainable scalars (normalisation buffers excluded)."""
    return int(sum(p.size for p in model.params.values()))


def check_shapes(params: Dict[str, np.ndarray], shapes: Dict[str, Tuple[int, ...]]):
    for k, shp in shapes.items():
        if k not in params:
            raise ShapeMismatch(f"missing parameter {k}")
        if params[k].shape != tuple(shp):
            raise ShapeMismatch(f"parameter {k} has shape {params[k].shape}, expected {tuple(shp)}")
