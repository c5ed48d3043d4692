"""Fully connected regression network.

Layer map: hidden layers ``h = act(h @ W + b)``, linear output layer. Inputs
and outputs pass through fixed affine normalisations (``x_shift``/``x_scale``,
``y_shift``/``y_scale``) that are not trained and not counted as parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from opflab.errors import ShapeMismatch
from opflab.neural.layers import ACTIVATIONS, check_shapes, dense_backward, dense_forward, glorot


@dataclass
class FccModel:
    widths: List[int]
    activation: str = "relu"
    bias: bool = True
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    x_shift: Optional[np.ndarray] = None
    x_scale: Optional[np.ndarray] = None
    y_shift: Optional[np.ndarray] = None
    y_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2:
            raise ShapeMismatch("an FCC needs at least input and output widths")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.params:
            check_shapes(self.params, self.shapes())
        d_in, d_out = self.widths[0], self.widths[-1]
        self.x_shift = np.zeros(d_in) if self.x_shift is None else np.asarray(self.x_shift, dtype=float)
        self.x_scale = np.ones(d_in) if self.x_scale is None else np.asarray(self.x_scale, dtype=float)
        self.y_shift = np.zeros(d_out) if self.y_shift is None else np.asarray(self.y_shift, dtype=float)
        self.y_scale = np.ones(d_out) if self.y_scale is None else np.asarray(self.y_scale, dtype=float)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def shapes(self) -> Dict[str, tuple]:
        out = {}
        for l in range(self.n_layers):
            out[f"W{l}"] = (self.widths[l], self.widths[l + 1])
            if self.bias:
                out[f"b{l}"] = (self.widths[l + 1],)
        return out

    @classmethod
    def init(cls, widths, activation: str = "relu", seed: int = 0, bias: bool = True) -> "FccModel":
        rng = np.random.default_rng(seed)
        m = cls(list(widths), activation, bias)
        for l in range(m.n_layers):
            m.params[f"W{l}"] = glorot(rng, m.widths[l], m.widths[l + 1])
            if bias:
                m.params[f"b{l}"] = np.zeros(m.widths[l + 1])
        return m

    def predict(self, x) -> np.ndarray:
        return fcc_forward(self, x)[0]


def fcc_forward(model: FccModel, x):
    """Returns ``(y, cache)``; ``x`` is ``(batch, widths[0])`` or a single vector."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != model.widths[0]:
        raise ShapeMismatch(f"model expects {model.widths[0]} inputs, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    act, _ = ACTIVATIONS[model.activation]
    h = (x - model.x_shift) / model.x_scale
    inputs, pre = [], []
    for l in range(model.n_layers):
        inputs.append(h)
        a = dense_forward(h, model.params[f"W{l}"], model.params.get(f"b{l}"))
        pre.append(a)
        h = act(a) if l < model.n_layers - 1 else a
    y = h * model.y_scale + model.y_shift
    cache = (inputs, pre, single)
    return (y[0] if single else y), cache


def fcc_backward(model: FccModel, cache, dy) -> Dict[str, np.ndarray]:
    """Parameter gradients of a scalar loss given ``dy = dloss/dy``."""
    inputs, pre, single = cache
    dy = np.asarray(dy, dtype=float)
    if single:
        dy = dy[None, :]
    _, dact = ACTIVATIONS[model.activation]
    grads = {}
    d = dy * model.y_scale
    for l in reversed(range(model.n_layers)):
        if l < model.n_layers - 1:
            d = dact(d, pre[l])
        d_in, dW, db = dense_backward(d, inputs[l], model.params[f"W{l}"], model.bias)
        grads[f"W{l}"] = dW
        if model.bias:
            grads[f"b{l}"] = db
        d = d_in
    return grads


def fcc_widths(n_bus: int, out: int, factor: int = 4, hidden_layers: int = 3) -> List[int]:
    """Input 2n, ``hidden_layers`` layers of ``factor * n``, then ``out``."""
    return [2 * n_bus] + [factor * n_bus] * hidden_layers + [out]


def fcc_param_formula(n_bus: int, out: int) -> int:
    n = n_bus
    return (2 * n * 4 * n + 4 * n) + 2 * (4 * n * 4 * n + 4 * n) + (4 * n * out + out)
