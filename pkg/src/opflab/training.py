"""Training loops: baseline FCC, Lagrangian-constrained FCC and the recurrent model.

All three share one mini-batch Adam loop. After every epoch the full train
and test losses are re-evaluated with the current parameters; the
checkpoint with the lowest test supervised loss is kept and training stops
after ``patience`` epochs without improvement. Multipliers are updated by
dual ascent every ``dual_period`` epochs using violation means over the
train split only.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from opflab.dataset import OpfDataset
from opflab.errors import NonFiniteLoss
from opflab.network import FAMILIES, PowerNetwork
from opflab.neural.fcc import FccModel, fcc_backward, fcc_forward, fcc_widths
from opflab.neural.losses import lagrangian_term, loss_basic, loss_rnn
from opflab.neural.optim import Adam
from opflab.neural.rnn import RnnModel, rnn_backward, rnn_forward
from opflab.solver import trajectory_indices

log = logging.getLogger(__name__)

KINDS = ("fcc", "fcc-constrained", "rnn")

# Bound hinges have unit slope in their own variable while the KCL residual
# moves with the line susceptances (tens of pu per pu), so the two groups
# start at different multipliers.
DEFAULT_LAMBDA = {"voltage": 1.0, "angle": 1.0, "generator": 1.0, "thermal": 1.0, "kcl": 0.01}


@dataclass
class TrainConfig:
    kind: str = "fcc"
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    lambda_init: Union[float, Dict[str, float]] = field(default_factory=lambda: dict(DEFAULT_LAMBDA))
    rho: float = 0.01
    dual_period: int = 5
    patience: int = 20
    T: Optional[int] = None
    activation: str = "relu"
    width_factor: int = 4
    hidden_layers: int = 3
    head: Optional[str] = None
    hidden: int = 8
    embed: int = 8
    teacher_forcing: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {', '.join(KINDS)}")
        for name in ("epochs", "batch_size", "dual_period", "patience", "width_factor", "hidden_layers",
                     "hidden", "embed"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if isinstance(self.lambda_init, dict):
            unknown = set(self.lambda_init) - set(FAMILIES)
            if unknown:
                raise ValueError(f"unknown constraint families in lambda_init: {sorted(unknown)}")
            self.lambda_init = {f: float(self.lambda_init.get(f, 0.0)) for f in FAMILIES}
            lam_min = min(self.lambda_init.values())
        else:
            self.lambda_init = float(self.lambda_init)
            lam_min = self.lambda_init
        if self.lr <= 0 or self.rho < 0 or lam_min < 0:
            raise ValueError("lr must be positive; rho and lambda_init non-negative")
        if self.head is None:
            self.head = "setpoints" if self.kind == "fcc" else "full"
        if self.head not in ("setpoints", "full"):
            raise ValueError("head must be 'setpoints' or 'full'")
        if self.kind == "rnn" and self.head != "full":
            raise ValueError("the recurrent model always predicts the full state")
        if self.T is not None and self.T < 1:
            raise ValueError("T must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    kind: str
    seed: int
    train_loss: List[float] = field(default_factory=list)
    test_loss: List[float] = field(default_factory=list)
    test_supervised: List[float] = field(default_factory=list)
    lam: Dict[str, float] = field(default_factory=dict)
    best_epoch: int = 0
    final_train_loss: float = float("nan")
    final_test_loss: float = float("nan")
    wall_time: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "kind": self.kind,
            "seed": self.seed,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "test_supervised": self.test_supervised,
            "lambda": self.lam,
            "final_train_loss": self.final_train_loss,
            "final_test_loss": self.final_test_loss,
        }
        if timing:
            d["wall_time"] = self.wall_time
        return d


# ---------------------------------------------------------------------------
# heads and targets


def setpoint_index(net: PowerNetwork) -> np.ndarray:
    """Positions of (pg, v at generator buses) inside the full-state layout."""
    G = net.n_gen
    return np.concatenate([np.arange(G), 2 * G + net.gen_bus])


def _targets(ds: OpfDataset, head: str) -> np.ndarray:
    return ds.full_states() if head == "full" else ds.setpoints()


def _trajectory_targets(ds: OpfDataset, T: int) -> np.ndarray:
    traj = ds.trajectories(full=True)
    if T > traj.shape[1]:
        raise ValueError(f"dataset stores {traj.shape[1]} trajectory snapshots; cannot train with T={T}")
    return traj[:, trajectory_indices(traj.shape[1], T), :]


def _scaler(a: np.ndarray, floor: float):
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    return mu, np.maximum(sd, floor)


def _x_scaler(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    return mu, np.where(sd < 1e-9, 1.0, sd)


# ---------------------------------------------------------------------------
# objective wrappers


class _Objective:
    """Loss/gradient for one model family on index subsets of a dataset."""

    def __init__(self, ds: OpfDataset, cfg: TrainConfig, model):
        self.ds, self.cfg, self.model = ds, cfg, model
        self.net = ds.net
        self.X = ds.features()
        if cfg.kind == "rnn":
            self.Y = _trajectory_targets(ds, model.T)
        else:
            self.Y = _targets(ds, cfg.head)
        self.constrained = cfg.head == "full"

    def final_prediction(self, idx):
        if self.cfg.kind == "rnn":
            return self.model.predict(self.X[idx])
        return fcc_forward(self.model, self.X[idx])[0]

    def final_target(self, idx):
        return self.Y[idx, -1, :] if self.cfg.kind == "rnn" else self.Y[idx]

    def loss_grad(self, idx, lam, need_grad=True):
        x = self.X[idx]
        if self.cfg.kind == "rnn":
            tgt = self.Y[idx]
            teacher = tgt if self.cfg.teacher_forcing else None
            outs, cache = rnn_forward(self.model, x, teacher=teacher)
            val, douts = loss_rnn(self.net, x, [tgt[:, t] for t in range(tgt.shape[1])], outs, lam)
            return val, (rnn_backward(self.model, cache, douts) if need_grad else None)
        yhat, cache = fcc_forward(self.model, x)
        val, g = loss_basic(self.Y[idx], yhat)
        if self.constrained and lam and any(lam.values()):
            pen, gp, _ = lagrangian_term(self.net, x, yhat, lam)
            val, g = val + pen, g + gp
        return val, (fcc_backward(self.model, cache, g) if need_grad else None)

    def supervised(self, idx) -> float:
        return loss_basic(self.final_target(idx), self.final_prediction(idx))[0]

    def violation_means(self, idx) -> Dict[str, float]:
        if not self.constrained:
            return {f: 0.0 for f in FAMILIES}
        _, _, means = lagrangian_term(self.net, self.X[idx], self.final_prediction(idx), {})
        return means


# ---------------------------------------------------------------------------
# generic loop


def _init_lambda(cfg: TrainConfig, constrained: bool) -> Dict[str, float]:
    if not constrained:
        return {f: 0.0 for f in FAMILIES}
    if isinstance(cfg.lambda_init, dict):
        return dict(cfg.lambda_init)
    return {f: cfg.lambda_init for f in FAMILIES}


def _fit(obj: _Objective, cfg: TrainConfig, lam: Dict[str, float], rho: float) -> TrainReport:
    ds = obj.ds
    if not ds.has_split:
        raise ValueError("dataset has no train/test split")
    train, test = np.asarray(ds.train), np.asarray(ds.test)
    if len(train) == 0:
        raise ValueError("empty training split")
    if len(test) == 0:
        test = train
    model = obj.model
    opt = Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    rep = TrainReport(cfg.kind, cfg.seed)
    t0 = time.perf_counter()
    best = (np.inf, None, None, -1)
    since = 0
    for epoch in range(cfg.epochs):
        perm = train[rng.permutation(len(train))]
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            val, grads = obj.loss_grad(idx, lam)
            if not np.isfinite(val) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLoss(f"non-finite loss {val} at epoch {epoch}, batch offset {s}, lambda {lam}")
            opt.step(grads)
        if rho > 0 and (epoch + 1) % cfg.dual_period == 0:
            means = obj.violation_means(train)
            lam = {f: max(0.0, lam[f] + rho * means[f]) for f in FAMILIES}
        tr = obj.loss_grad(train, lam, need_grad=False)[0]
        te = obj.loss_grad(test, lam, need_grad=False)[0]
        sup = obj.supervised(test)
        if not (np.isfinite(tr) and np.isfinite(te)):
            raise NonFiniteLoss(f"non-finite evaluation loss at epoch {epoch} (train {tr}, test {te})")
        rep.train_loss.append(float(tr))
        rep.test_loss.append(float(te))
        rep.test_supervised.append(float(sup))
        if sup < best[0]:
            best = (sup, {k: v.copy() for k, v in model.params.items()}, dict(lam), epoch)
            since = 0
        else:
            since += 1
            if since >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[3])
                break
        if epoch % 25 == 0:
            log.info("%s epoch %d train %.3e test %.3e", cfg.kind, epoch, tr, te)
    for k, v in best[1].items():
        model.params[k][...] = v
    rep.lam = lam
    rep.best_epoch = best[3]
    rep.final_train_loss = float(obj.loss_grad(train, lam, need_grad=False)[0])
    rep.final_test_loss = float(obj.loss_grad(test, lam, need_grad=False)[0])
    rep.wall_time = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# public entry points


def _build_fcc(ds: OpfDataset, cfg: TrainConfig) -> FccModel:
    net = ds.net
    out = 2 * net.n_gen if cfg.head == "setpoints" else 2 * net.n_gen + 2 * net.n_bus
    widths = fcc_widths(net.n_bus, out, cfg.width_factor, cfg.hidden_layers)
    model = FccModel.init(widths, cfg.activation, seed=cfg.seed)
    X = ds.features(ds.train)
    Y = _targets(ds.subset(ds.train), cfg.head)
    model.x_shift, model.x_scale = _x_scaler(X)
    model.y_shift, model.y_scale = _scaler(Y, 1e-3)
    return model


def train_fcc(ds: OpfDataset, cfg: Optional[TrainConfig] = None) -> Tuple[FccModel, TrainReport]:
    """Minimise the supervised loss only (the multipliers stay at zero)."""
    cfg = cfg or TrainConfig(kind="fcc")
    model = _build_fcc(ds, cfg)
    rep = _fit(_Objective(ds, cfg, model), cfg, _init_lambda(cfg, False), 0.0)
    return model, rep


def train_fcc_constrained(ds: OpfDataset, cfg: Optional[TrainConfig] = None) -> Tuple[FccModel, TrainReport]:
    """Full-state FCC trained on the supervised loss plus multiplier-weighted violations."""
    cfg = cfg or TrainConfig(kind="fcc-constrained")
    if cfg.head != "full":
        raise ValueError("the constrained model needs the full-state head")
    model = _build_fcc(ds, cfg)
    rep = _fit(_Objective(ds, cfg, model), cfg, _init_lambda(cfg, True), cfg.rho)
    return model, rep


def train_rnn(ds: OpfDataset, cfg: Optional[TrainConfig] = None) -> Tuple[RnnModel, TrainReport]:
    """Recurrent model against the solver trajectories with sqrt(t)-weighted unit losses."""
    cfg = cfg or TrainConfig(kind="rnn")
    net = ds.net
    T = cfg.T or ds.T
    D = 2 * net.n_gen + 2 * net.n_bus
    model = RnnModel.init(2 * net.n_bus, D, setpoint_index(net), cfg.hidden, cfg.embed, T, seed=cfg.seed)
    X = ds.features(ds.train)
    traj = _trajectory_targets(ds.subset(ds.train), T)
    model.x_shift, model.x_scale = _x_scaler(X)
    stats = [_scaler(traj[:, t, :], 1e-3) for t in range(T)]
    model.y_shift = np.stack([m for m, _ in stats])
    model.y_scale = np.stack([sd for _, sd in stats])
    rep = _fit(_Objective(ds, cfg, model), cfg, _init_lambda(cfg, True), cfg.rho)
    return model, rep


def train(ds: OpfDataset, cfg: TrainConfig):
    if cfg.kind == "fcc":
        return train_fcc(ds, cfg)
    if cfg.kind == "fcc-constrained":
        return train_fcc_constrained(ds, cfg)
    return train_rnn(ds, cfg)


def recompute_losses(model, ds: OpfDataset, cfg: TrainConfig, lam: Dict[str, float]) -> Tuple[float, float]:
    """Train and test loss of ``model`` at multipliers ``lam`` (reproducibility check)."""
    obj = _Objective(ds, cfg, model)
    test = ds.test if len(ds.test) else ds.train
    return (float(obj.loss_grad(np.asarray(ds.train), lam, need_grad=False)[0]),
            float(obj.loss_grad(np.asarray(test), lam, need_grad=False)[0]))
