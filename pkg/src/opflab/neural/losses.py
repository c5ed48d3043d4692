"""Training losses and their gradients with respect to the prediction.

Every function returns ``(value, grad)`` where ``value`` is the batch mean
and ``grad`` has the prediction's shape.

Full-state predictions are laid out as ``[pg (G), qg (G), v (n), theta (n)]``.
Constraint violation degrees, one scalar per family and sample:

* voltage    mean over buses of max(0, v - vmax) + max(0, vmin - v)
* angle      mean over branches of max(0, |theta_f - theta_t| - limit)
* generator  mean over the 2G active/reactive entries of the bound hinge
* thermal    mean over rated arcs of max(0, |S| - rate)
* kcl        mean over buses of |Re r| + |Im r| for the KCL residual r
"""
from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from opflab.errors import ShapeMismatch
from opflab.network import FAMILIES, PowerNetwork, arc_partials


def loss_basic(y, yhat) -> Tuple[float, np.ndarray]:
    """Squared error summed over coordinates, averaged over the batch."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ShapeMismatch(f"target shape {y.shape} != prediction shape {yhat.shape}")
    d = yhat - y
    if d.ndim == 1:
        return float(d @ d), 2 * d
    B = d.shape[0]
    return float(np.sum(d * d) / B), 2 * d / B


def _split(net: PowerNetwork, yfull):
    G, n = net.n_gen, net.n_bus
    if yfull.shape[-1] != 2 * G + 2 * n:
        raise ShapeMismatch(f"full-state prediction needs {2 * G + 2 * n} entries, got {yfull.shape[-1]}")
    return yfull[:, :G], yfull[:, G:2 * G], yfull[:, 2 * G:2 * G + n], yfull[:, 2 * G + n:]


def _hinge(a):
    return np.maximum(a, 0.0), (a > 0).astype(float)


def _onehot(idx, n):
    m = np.zeros((len(idx), n))
    m[np.arange(len(idx)), idx] = 1.0
    return m


def violation_degrees(net: PowerNetwork, x, yfull) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Per-sample violation degree of each family and its gradient w.r.t. ``yfull``.

    ``x`` holds the loads ``[pd, qd]``. Returns ``(nu, dnu)`` with ``nu[f]`` of
    shape ``(B,)`` and ``dnu[f]`` of shape ``(B, D)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    yfull = np.atleast_2d(np.asarray(yfull, dtype=float))
    n, G = net.n_bus, net.n_gen
    if x.shape[-1] != 2 * n:
        raise ShapeMismatch(f"load vector needs {2 * n} entries, got {x.shape[-1]}")
    pg, qg, v, th = _split(net, yfull)
    B, D = yfull.shape
    sl_pg, sl_qg = slice(0, G), slice(G, 2 * G)
    sl_v, sl_th = slice(2 * G, 2 * G + n), slice(2 * G + n, 2 * G + 2 * n)
    nu, dnu = {}, {}

    # voltage
    up, gup = _hinge(v - net.vmax)
    lo, glo = _hinge(net.vmin - v)
    nu["voltage"] = (up + lo).mean(axis=1)
    g = np.zeros((B, D))
    g[:, sl_v] = (gup - glo) / n
    dnu["voltage"] = g

    # angle differences (small-angle form, no wrapping)
    m = net.n_branch
    g = np.zeros((B, D))
    if m:
        d = th[:, net.f_bus] - th[:, net.t_bus]
        a, ga = _hinge(np.abs(d) - net.angle_limit)
        nu["angle"] = a.mean(axis=1)
        gd = ga * np.sign(d) / m
        g[:, sl_th] = gd @ _onehot(net.f_bus, n) - gd @ _onehot(net.t_bus, n)
    else:
        nu["angle"] = np.zeros(B)
    dnu["angle"] = g

    # generator bounds
    hp_u, gp_u = _hinge(pg - net.pmax)
    hp_l, gp_l = _hinge(net.pmin - pg)
    hq_u, gq_u = _hinge(qg - net.qmax)
    hq_l, gq_l = _hinge(net.qmin - qg)
    nu["generator"] = (hp_u + hp_l + hq_u + hq_l).sum(axis=1) / (2 * G)
    g = np.zeros((B, D))
    g[:, sl_pg] = (gp_u - gp_l) / (2 * G)
    g[:, sl_qg] = (gq_u - gq_l) / (2 * G)
    dnu["generator"] = g

    ap = arc_partials(net, v, th)
    fi, ti = net.arc_from, net.arc_to
    oh_f, oh_t = _onehot(fi, n), _onehot(ti, n)

    def scatter_arc(w_p, w_q):
        # gradient of sum_a (w_p[a] P_a + w_q[a] Q_a) w.r.t. (theta, v)
        gth = (w_p * ap.dp[..., 0] + w_q * ap.dq[..., 0]) @ oh_f + (w_p * ap.dp[..., 1] + w_q * ap.dq[..., 1]) @ oh_t
        gv = (w_p * ap.dp[..., 2] + w_q * ap.dq[..., 2]) @ oh_f + (w_p * ap.dp[..., 3] + w_q * ap.dq[..., 3]) @ oh_t
        return gth, gv

    # thermal: |S| on rated arcs
    rated = np.isfinite(net.arc_rate)
    g = np.zeros((B, D))
    if rated.any():
        smag = np.sqrt(ap.p**2 + ap.q**2)
        over, gover = _hinge(smag - np.where(rated, net.arc_rate, np.inf))
        over = np.where(rated, over, 0.0)
        nu["thermal"] = over.sum(axis=1) / rated.sum()
        safe = np.maximum(smag, 1e-12)
        w = np.where(rated, gover, 0.0) / rated.sum()
        gth, gv = scatter_arc(w * ap.p / safe, w * ap.q / safe)
        g[:, sl_th], g[:, sl_v] = gth, gv
    else:
        nu["thermal"] = np.zeros(B)
    dnu["thermal"] = g

    # kcl: gen - load - shunt - sum of outgoing arc flows
    pd, qd = x[:, :n], x[:, n:]
    oh_g = _onehot(net.gen_bus, n)
    out_p = ap.p @ oh_f
    out_q = ap.q @ oh_f
    re = pg @ oh_g - pd - net.gs * v**2 - out_p
    im = qg @ oh_g - qd + net.bs * v**2 - out_q
    nu["kcl"] = (np.abs(re) + np.abs(im)).mean(axis=1)
    sre, sim = np.sign(re) / n, np.sign(im) / n
    g = np.zeros((B, D))
    g[:, sl_pg] = sre @ oh_g.T
    g[:, sl_qg] = sim @ oh_g.T
    gth, gv = scatter_arc(-sre[:, fi], -sim[:, fi])
    g[:, sl_th] = gth
    g[:, sl_v] = gv + (-2 * net.gs * sre + 2 * net.bs * sim) * v
    dnu["kcl"] = g
    return nu, dnu


def lagrangian_term(net: PowerNetwork, x, yfull, lam: Dict[str, float]):
    """Batch mean of ``sum_f lam_f * nu_f`` and its gradient; also the per-family means."""
    nu, dnu = violation_degrees(net, x, yfull)
    B = yfull.shape[0] if np.ndim(yfull) == 2 else 1
    val = 0.0
    grad = np.zeros_like(np.atleast_2d(yfull), dtype=float)
    for f in FAMILIES:
        w = float(lam.get(f, 0.0))
        if w < 0:
            raise ValueError("Lagrange multipliers must be non-negative")
        if w:
            val += w * float(nu[f].mean())
            grad += w * dnu[f] / B
    means = {f: float(nu[f].mean()) for f in FAMILIES}
    return val, grad.reshape(np.shape(yfull)), means


def loss_lagrangian(net: PowerNetwork, x, yhat_full, y_full, lam: Dict[str, float]):
    """loss_basic on the full state plus the multiplier-weighted violation degrees."""
    yhat_full = np.asarray(yhat_full, dtype=float)
    base, gb = loss_basic(y_full, yhat_full)
    pen, gp, _ = lagrangian_term(net, x, yhat_full, lam)
    return base + pen, gb + gp


def loss_rnn(net: Optional[PowerNetwork], x, targets, preds, lam: Optional[Dict[str, float]] = None):
    """sum_t sqrt(t) * loss_basic(y^t, yhat^t) + sum_f lam_f * nu_f(yhat^T).

    ``targets`` and ``preds`` are sequences of ``T`` arrays (or ``(T, ...)``
    arrays). Returns ``(value, [grad_t])``.
    """
    T = len(preds)
    if len(targets) != T:
        raise ShapeMismatch(f"{len(targets)} targets for {T} predictions")
    val, grads = 0.0, []
    for t in range(T):
        w = np.sqrt(t + 1.0)
        l, g = loss_basic(targets[t], preds[t])
        val += w * l
        grads.append(w * g)
    if lam and any(lam.values()):
        if net is None:
            raise ValueError("constraint term needs the network")
        pen, gp, _ = lagrangian_term(net, x, np.asarray(preds[-1], dtype=float), lam)
        val += pen
        grads[-1] = grads[-1] + gp
    return val, grads
