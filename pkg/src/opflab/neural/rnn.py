"""LSTM cell and the autoregressive recurrent predictor.

Gate layout in the fused weight ``W`` (shape ``(in + hidden, 4 * hidden)``):
input, forget, candidate, output.

The recurrent model unrolls one shared cell ``T`` times. Unit ``t`` reads the
load vector, an embedding of the set-point part of the previous unit's
prediction (a zero vector for the first unit) and the previous state, and a
linear head maps its hidden state to a prediction. The last unit's
prediction is the model output.

Output normalisation buffers ``y_shift``/``y_scale`` have shape ``(T, n_out)``
so each unit is de-normalised with the statistics of its own trajectory
snapshot; a ``(n_out,)`` buffer is shared by all units.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from opflab.errors import ShapeMismatch
from opflab.neural.layers import check_shapes, dense_backward, glorot, sigmoid


@dataclass
class LstmCell:
    W: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4

    @property
    def n_in(self) -> int:
        return self.W.shape[0] - self.hidden

    @classmethod
    def init(cls, n_in: int, hidden: int, rng: np.random.Generator) -> "LstmCell":
        W = glorot(rng, n_in + hidden, hidden, shape=(n_in + hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        # forget-gate bias of one keeps early gradients alive
        b[hidden:2 * hidden] = 1.0
        return cls(W, b)


def lstm_step(cell: LstmCell, x, h_prev, c_prev):
    """One LSTM update. Returns ``(h, c, cache)``; all arrays are ``(batch, .)``."""
    H = cell.hidden
    if x.shape[-1] != cell.n_in or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeMismatch(f"lstm step expects input {cell.n_in} and state {H}")
    z = np.concatenate([x, h_prev], axis=-1)
    a = z @ cell.W + cell.b
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H:2 * H])
    g = np.tanh(a[..., 2 * H:3 * H])
    o = sigmoid(a[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (z, i, f, g, o, c_prev, tc)


def lstm_step_backward(cell: LstmCell, cache, dh, dc):
    """Back-propagate ``(dh, dc)`` through one step.

    Returns ``(dx, dh_prev, dc_prev, dW, db)``.
    """
    z, i, f, g, o, c_prev, tc = cache
    H = cell.hidden
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    da = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=-1)
    dz, dW, db = dense_backward(da, z, cell.W)
    return dz[..., :-H], dz[..., -H:], dc_prev, dW, db


@dataclass
class RnnModel:
    """Autoregressive LSTM predictor.

    ``set_idx`` selects the output coordinates that are embedded and fed to
    the next unit (the set-points: pg and v at generator buses).
    """

    n_in: int
    n_out: int
    set_idx: np.ndarray
    hidden: int = 8
    embed: int = 8
    T: int = 5
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    x_shift: Optional[np.ndarray] = None
    x_scale: Optional[np.ndarray] = None
    y_shift: Optional[np.ndarray] = None
    y_scale: Optional[np.ndarray] = None
    steps_taken: int = field(default=0, compare=False)

    def __post_init__(self):
        self.set_idx = np.asarray(self.set_idx, dtype=int)
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.params:
            check_shapes(self.params, self.shapes())
        self.x_shift = np.zeros(self.n_in) if self.x_shift is None else np.asarray(self.x_shift, dtype=float)
        self.x_scale = np.ones(self.n_in) if self.x_scale is None else np.asarray(self.x_scale, dtype=float)
        self.y_shift = np.zeros(self.n_out) if self.y_shift is None else np.asarray(self.y_shift, dtype=float)
        self.y_scale = np.ones(self.n_out) if self.y_scale is None else np.asarray(self.y_scale, dtype=float)
        for buf in (self.y_shift, self.y_scale):
            if buf.shape not in ((self.n_out,), (self.T, self.n_out)):
                raise ShapeMismatch(f"output normalisation must be ({self.n_out},) or ({self.T}, {self.n_out})")

    def out_norm(self, t: int):
        """``(shift, scale)`` applied to unit ``t``'s output."""
        sh = self.y_shift if self.y_shift.ndim == 1 else self.y_shift[t]
        sc = self.y_scale if self.y_scale.ndim == 1 else self.y_scale[t]
        return sh, sc

    def shapes(self) -> Dict[str, tuple]:
        H, E = self.hidden, self.embed
        return {
            "emb_W": (len(self.set_idx), E),
            "emb_b": (E,),
            "lstm_W": (self.n_in + E + H, 4 * H),
            "lstm_b": (4 * H,),
            "head_W": (H, self.n_out),
            "head_b": (self.n_out,),
        }

    @classmethod
    def init(cls, n_in: int, n_out: int, set_idx, hidden: int = 8, embed: int = 8, T: int = 5,
             seed: int = 0) -> "RnnModel":
        rng = np.random.default_rng(seed)
        m = cls(n_in, n_out, set_idx, hidden, embed, T)
        cell = LstmCell.init(n_in + embed, hidden, rng)
        m.params = {
            "emb_W": glorot(rng, len(m.set_idx), embed),
            "emb_b": np.zeros(embed),
            "lstm_W": cell.W,
            "lstm_b": cell.b,
            "head_W": glorot(rng, hidden, n_out),
            "head_b": np.zeros(n_out),
        }
        return m

    @property
    def cell(self) -> LstmCell:
        return LstmCell(self.params["lstm_W"], self.params["lstm_b"])

    def predict(self, x) -> np.ndarray:
        return rnn_forward(self, x)[0][-1]


def rnn_forward(model: RnnModel, x, teacher=None, inject=None):
    """Unroll ``T`` units. Returns ``(outputs, cache)`` with ``outputs`` a list of ``T`` arrays.

    ``teacher`` (shape ``(batch, T, n_out)``), when given, replaces the fed-back
    prediction of unit ``t`` by the target of unit ``t``. ``inject`` adds a
    fixed offset to the fed-back value of unit 1 (sensitivity probes).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != model.n_in:
        raise ShapeMismatch(f"model expects {model.n_in} inputs, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    p = model.params
    cell = model.cell
    B = x.shape[0]
    xn = (x - model.x_shift) / model.x_scale
    h = np.zeros((B, model.hidden))
    c = np.zeros((B, model.hidden))
    emb = np.zeros((B, model.embed))
    outs, caches = [], []
    for t in range(model.T):
        h, c, lc = lstm_step(cell, np.concatenate([xn, emb], axis=-1), h, c)
        model.steps_taken += 1
        yn = h @ p["head_W"] + p["head_b"]
        sh, sc = model.out_norm(t)
        outs.append(yn * sc + sh)
        if teacher is not None:
            fed = (np.asarray(teacher)[:, t, :] - sh) / sc
        else:
            fed = yn
        fed = fed[:, model.set_idx]
        if inject is not None and t == 0:
            fed = fed + inject
        caches.append((lc, h, fed))
        emb = fed @ p["emb_W"] + p["emb_b"]
    cache = (caches, teacher is not None, single)
    if single:
        outs = [o[0] for o in outs]
    return outs, cache


def rnn_backward(model: RnnModel, cache, douts: List[np.ndarray]) -> Dict[str, np.ndarray]:
    """Back-propagation through time for per-unit output gradients ``douts``."""
    caches, teacher, single = cache
    p = model.params
    cell = model.cell
    H, E = model.hidden, model.embed
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    douts = [np.asarray(d, dtype=float)[None, :] if single else np.asarray(d, dtype=float) for d in douts]
    B = douts[0].shape[0]
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dyn_carry = np.zeros((B, model.n_out))
    for t in reversed(range(model.T)):
        lc, h, fed = caches[t]
        dyn = douts[t] * model.out_norm(t)[1] + dyn_carry
        grads["head_W"] += h.T @ dyn
        grads["head_b"] += dyn.sum(axis=0)
        dh = dyn @ p["head_W"].T + dh_next
        dinp, dh_next, dc_next, dW, db = lstm_step_backward(cell, lc, dh, dc_next)
        grads["lstm_W"] += dW
        grads["lstm_b"] += db
        demb = dinp[:, model.n_in:]
        dyn_carry = np.zeros((B, model.n_out))
        if t > 0:
            _, _, fed_prev = caches[t - 1]
            grads["emb_W"] += fed_prev.T @ demb
            grads["emb_b"] += demb.sum(axis=0)
            if not teacher:
                dyn_carry[:, model.set_idx] = demb @ p["emb_W"].T
    return grads


def rnn_param_formula(n_in: int, n_out: int, n_set: int, hidden: int, embed: int) -> int:
    return (n_set * embed + embed) + ((n_in + embed + hidden) * 4 * hidden + 4 * hidden) + (hidden * n_out + n_out)
