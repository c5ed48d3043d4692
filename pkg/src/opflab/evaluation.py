"""Metric suite for trained predictors and dataset-level analyses.

Percent errors are per generator: the absolute active-power error divided
by that generator's dispatch spread over the whole dataset (max - min),
floored at 0.01 pu. Voltage set-point errors are reported in pu.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

from opflab.dataset import OpfDataset
from opflab.network import LoadVector, OperatingPoint, PowerNetwork, angle_differences, arc_flows, \
    constraint_violations, dispatch_cost
from opflab.neural.fcc import FccModel
from opflab.neural.layers import param_count
from opflab.neural.rnn import RnnModel
from opflab.pwl import CITable
from opflab.solver import SolverOptions, project_load_flow
from opflab.training import TrainConfig, setpoint_index, train

log = logging.getLogger(__name__)

RANGE_FLOOR = 0.01


# ---------------------------------------------------------------------------
# predictors


class Predictor:
    """Uniform view of a trained model: set-points and, if available, the full state."""

    def __init__(self, model, net: PowerNetwork, head: str):
        if head not in ("setpoints", "full"):
            raise ValueError("head must be 'setpoints' or 'full'")
        self.model, self.net, self.head = model, net, head
        out = model.widths[-1] if isinstance(model, FccModel) else model.n_out
        expect = 2 * net.n_gen if head == "setpoints" else 2 * net.n_gen + 2 * net.n_bus
        n_in = model.widths[0] if isinstance(model, FccModel) else model.n_in
        if out != expect or n_in != 2 * net.n_bus:
            from opflab.errors import ShapeMismatch

            raise ShapeMismatch(f"model maps {n_in} -> {out} values but case {net.name!r} needs "
                                f"{2 * net.n_bus} -> {expect}")

    def predict(self, X):
        y = self.model.predict(np.asarray(X, dtype=float))
        if self.head == "full":
            return y[:, setpoint_index(self.net)], y
        return y, None


class TruthEcho:
    """Debug predictor returning the stored solution of a sample with identical loads."""

    head = "full"

    def __init__(self, ds: OpfDataset):
        self.net = ds.net
        self._table = {ds.features([k])[0].tobytes(): k for k in range(len(ds))}
        self._ds = ds

    def predict(self, X):
        idx = [self._table[np.asarray(x, dtype=float).tobytes()] for x in X]
        return self._ds.setpoints(idx), self._ds.full_states(idx)


def split_full(net: PowerNetwork, y) -> OperatingPoint:
    G, n = net.n_gen, net.n_bus
    return OperatingPoint(y[2 * G:2 * G + n], y[2 * G + n:], y[:G], y[G:2 * G])


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    n_test: int
    pred_error: float
    pred_error_pu: float
    lf_error: float
    lf_error_pu: float
    opt_gap: float
    bound_violation: float
    kcl_violation: Optional[float]
    per_gen_error: List[float]
    per_gen_lf_error: List[float]
    v_error_pu: float
    lf_v_error_pu: float
    violation_means: Dict[str, float] = field(default_factory=dict)
    projection_failures: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in ("n_test", "pred_error", "pred_error_pu", "lf_error", "lf_error_pu", "v_error_pu",
                  "lf_v_error_pu", "opt_gap",
                  "bound_violation", "kcl_violation", "projection_failures"):
            v = getattr(self, k)
            w.writerow([k, "" if v is None else repr(v)])
        for g, e in enumerate(self.per_gen_error):
            w.writerow([f"gen_error_{g}", repr(e)])
        return buf.getvalue()


def dispatch_ranges(ds: OpfDataset) -> np.ndarray:
    """Per-generator active dispatch spread over the dataset, floored at ``RANGE_FLOOR``."""
    P = ds.setpoints()[:, :ds.net.n_gen]
    return np.maximum(P.max(axis=0) - P.min(axis=0), RANGE_FLOOR)


def _project(args):
    net, pd, qd, yhat, opts = args
    return project_load_flow(net, LoadVector(pd, qd), yhat, opts)


def evaluate_model(predictor, ds: OpfDataset, idx: Optional[Sequence[int]] = None,
                   opts: Optional[SolverOptions] = None, workers: int = 1, project: bool = True) -> EvalReport:
    """Prediction, load-flow and optimality-gap errors plus violations on ``idx`` (default: test split)."""
    net = ds.net
    if idx is None:
        idx = ds.test if ds.has_split else np.arange(len(ds))
    idx = np.asarray(idx, dtype=int)
    if len(idx) == 0:
        raise ValueError("no samples to evaluate")
    opts = opts or SolverOptions(record_trajectory=False)
    G = net.n_gen
    X = ds.features(idx)
    Y = ds.setpoints(idx)
    rng = dispatch_ranges(ds)
    yhat, full = predictor.predict(X)
    err = np.abs(yhat - Y)
    pct = 100.0 * err[:, :G] / rng

    # load-flow projection of every prediction
    lf_pct, lf_pu, lf_v, gaps = [], [], [], []
    failures = 0
    if project:
        jobs = [(net, ds.samples[k].loads.pd, ds.samples[k].loads.qd, yhat[m], opts) for m, k in enumerate(idx)]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                results = list(pool.map(_project, jobs))
        else:
            results = [_project(j) for j in jobs]
        for m, (k, res) in enumerate(zip(idx, results)):
            if not res.converged:
                failures += 1
                log.warning("projection failed for sample %d (%s)", k, res.status.value)
                continue
            yp = res.point.setpoints(net)
            e = np.abs(yp - Y[m])
            lf_pu.append(e.sum())
            lf_pct.append(100.0 * e[:G] / rng)
            lf_v.append(e[G:].mean())
            opt = ds.samples[k].objective
            gaps.append(100.0 * abs(float(dispatch_cost(net, res.point.pg)) - opt) / max(abs(opt), 1e-9))
    lf_pct_arr = np.array(lf_pct) if lf_pct else np.full((1, G), np.nan)

    # violations of the predicted state
    fam_sum: Dict[str, float] = {}
    bound, kcl = [], []
    for m, k in enumerate(idx):
        loads = ds.samples[k].loads
        if full is not None:
            rep = constraint_violations(net, split_full(net, full[m]), loads)
            bound.append(rep.bound_mean)
            kcl.append(rep.mean["kcl"])
            for f, v in rep.mean.items():
                fam_sum[f] = fam_sum.get(f, 0.0) + v
        else:
            pg, vg = yhat[m, :G], yhat[m, G:]
            vb = np.concatenate([
                np.maximum(pg - net.pmax, 0) + np.maximum(net.pmin - pg, 0),
                np.maximum(vg - net.vmax[net.gen_bus], 0) + np.maximum(net.vmin[net.gen_bus] - vg, 0),
            ])
            bound.append(float(vb.mean()))
    return EvalReport(
        n_test=int(len(idx)),
        pred_error=float(pct.mean()),
        pred_error_pu=float(err.sum(axis=1).mean()),
        lf_error=float(np.nanmean(lf_pct_arr)) if project else float("nan"),
        lf_error_pu=float(np.mean(lf_pu)) if lf_pu else float("nan"),
        opt_gap=float(np.mean(gaps)) if gaps else float("nan"),
        bound_violation=float(np.mean(bound)),
        kcl_violation=float(np.mean(kcl)) if kcl else None,
        per_gen_error=pct.mean(axis=0).tolist(),
        per_gen_lf_error=np.nanmean(lf_pct_arr, axis=0).tolist() if project else [],
        v_error_pu=float(err[:, G:].mean()),
        lf_v_error_pu=float(np.mean(lf_v)) if lf_v else float("nan"),
        violation_means={f: v / len(idx) for f, v in fam_sum.items()},
        projection_failures=failures,
    )


# ---------------------------------------------------------------------------
# complexity vs error


def ci_error_correlation(ci_table: CITable, errors: Sequence[float]) -> dict:
    """Spearman rank correlation between generators' CI order and their errors.

    CI ties share the average rank. If either side is constant the
    correlation is reported as 0.
    """
    rows = ci_table.rows
    if len(rows) < 3:
        raise ValueError("need at least three generators")
    errors = np.asarray(errors, dtype=float)
    if len(errors) != len(rows):
        raise ValueError("one error per generator required")
    keys = sorted({r.ci.key() for r in rows})
    ci_rank = rankdata([keys.index(r.ci.key()) for r in rows], method="average")
    order = sorted(range(len(rows)), key=lambda m: (rows[m].ci.key(), m))
    if np.ptp(ci_rank) == 0 or np.ptp(errors) == 0:
        rho = 0.0
    else:
        rho = float(spearmanr(ci_rank, errors).statistic)
    return {
        "order": [rows[m].gen for m in order],
        "points": [{"gen": rows[m].gen, "p": rows[m].ci.p, "omega": rows[m].ci.omega,
                    "error": float(errors[m])} for m in order],
        "rho": rho,
    }


# ---------------------------------------------------------------------------
# studies that train models


def _pg_pct(predictor, ds, idx):
    Y = ds.setpoints(idx)
    yhat, _ = predictor.predict(ds.features(idx))
    G = ds.net.n_gen
    return yhat, 100.0 * np.abs(yhat - Y)[:, :G] / dispatch_ranges(ds), G


def activation_comparison(ds: OpfDataset, cfg: Optional[TrainConfig] = None,
                          activations=("relu", "tanh")) -> dict:
    """Twin FCCs differing only in activation; predicted pg along the alpha sweep of the test split."""
    cfg = cfg or TrainConfig(kind="fcc")
    idx = np.asarray(ds.test)
    idx = idx[np.argsort(ds.alphas(idx), kind="stable")]
    G = ds.net.n_gen
    truth = ds.setpoints(idx)[:, :G]
    preds, errs = {}, {}
    for a in activations:
        model, _ = train(ds, replace(cfg, activation=a, kind="fcc", head="setpoints"))
        yhat, pct, _ = _pg_pct(Predictor(model, ds.net, "setpoints"), ds, idx)
        preds[a] = yhat[:, :G]
        errs[a] = float(pct.mean())
    rows = []
    for m, k in enumerate(idx):
        for g in range(G):
            rows.append({"alpha": float(ds.samples[k].alpha), "gen": g, "truth": float(truth[m, g]),
                         **{a: float(preds[a][m, g]) for a in activations}})
    return {"rows": rows, "mean_error": errs, "activations": list(activations)}


def model_size_sweep(ds: OpfDataset, widths: Sequence[int], cfg: Optional[TrainConfig] = None) -> List[dict]:
    """One FCC per hidden width (shared seed); per-generator test errors against parameter count."""
    if len(widths) < 2:
        raise ValueError("need at least two widths")
    cfg = cfg or TrainConfig(kind="fcc")
    n = ds.net.n_bus
    rows = []
    for w in widths:
        if w % n:
            raise ValueError(f"width {w} is not a multiple of the bus count {n}")
        model, _ = train(ds, replace(cfg, kind="fcc", head="setpoints", width_factor=w // n))
        _, pct, G = _pg_pct(Predictor(model, ds.net, "setpoints"), ds, ds.test)
        for g in range(G):
            rows.append({"width": int(w), "params": param_count(model), "gen": g,
                         "error": float(pct[:, g].mean())})
    return rows


# ---------------------------------------------------------------------------
# binding constraints


def binding_constraints(net: PowerNetwork, op: OperatingPoint, tol: float = 1e-4) -> List[str]:
    """Names of inequality constraints within ``tol`` of their bound at ``op``."""
    out = []
    ids = net.bus_ids
    for k in np.flatnonzero(op.v >= net.vmax - tol):
        out.append(f"vmax[{ids[k]}]")
    for k in np.flatnonzero(op.v <= net.vmin + tol):
        out.append(f"vmin[{ids[k]}]")
    for name, val, lo, hi in (("p", op.pg, net.pmin, net.pmax), ("q", op.qg, net.qmin, net.qmax)):
        for g in np.flatnonzero(val >= hi - tol):
            out.append(f"{name}max[{g}]")
        for g in np.flatnonzero(val <= lo + tol):
            out.append(f"{name}min[{g}]")
    s = np.abs(arc_flows(net, op.v, op.theta))
    rated = np.isfinite(net.arc_rate)
    for a in np.flatnonzero(rated & (s >= net.arc_rate - tol)):
        out.append(f"thermal[{a % net.n_branch}{'f' if a < net.n_branch else 't'}]")
    lim = net.angle_limit < np.pi / 2
    d = np.abs(angle_differences(net, op.theta))
    for k in np.flatnonzero(lim & (d >= net.angle_limit - tol)):
        out.append(f"angle[{k}]")
    return out


def binding_constraint_scan(ds: OpfDataset, tol_bind: float = 1e-4) -> dict:
    """Per-sample binding sets along the alpha sweep and the alpha intervals of each constraint."""
    order = np.argsort(ds.alphas(), kind="stable")
    per_sample = []
    runs: Dict[str, List[List[float]]] = {}
    open_run: Dict[str, int] = {}
    prev_alpha = None
    for pos, k in enumerate(order):
        s = ds.samples[k]
        names = binding_constraints(ds.net, s.point, tol_bind)
        per_sample.append({"alpha": float(s.alpha), "binding": names})
        for nm in names:
            if nm in open_run and open_run[nm] == pos - 1:
                runs[nm][-1][1] = float(s.alpha)
            else:
                runs.setdefault(nm, []).append([float(s.alpha), float(s.alpha)])
            open_run[nm] = pos
        prev_alpha = s.alpha
    del prev_alpha
    return {"samples": per_sample, "intervals": {k: [tuple(r) for r in v] for k, v in sorted(runs.items())}}


# ---------------------------------------------------------------------------
# model footprint


def param_table(cases: Dict[str, PowerNetwork], cfg: Optional[TrainConfig] = None) -> List[dict]:
    """Analytic parameter counts of the baseline FCC and the default recurrent model per case."""
    from opflab.neural.fcc import fcc_widths
    from opflab.training import setpoint_index as _si

    cfg = cfg or TrainConfig(kind="rnn")
    rows = []
    for name, net in cases.items():
        fcc = FccModel.init(fcc_widths(net.n_bus, 2 * net.n_gen, cfg.width_factor, cfg.hidden_layers))
        rnn = RnnModel.init(2 * net.n_bus, 2 * net.n_gen + 2 * net.n_bus, _si(net), cfg.hidden, cfg.embed,
                            cfg.T or 5)
        pf, pr = param_count(fcc), param_count(rnn)
        rows.append({"case": name, "n_bus": net.n_bus, "n_gen": net.n_gen, "fcc_params": pf, "rnn_params": pr,
                     "ratio": pf / pr})
    return rows
