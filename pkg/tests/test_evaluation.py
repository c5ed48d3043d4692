import json

import numpy as np
import pytest

from opflab.dataset import generate_dataset
from opflab.errors import ShapeMismatch
from opflab.evaluation import (RANGE_FLOOR, EvalReport, Predictor, TruthEcho, activation_comparison,
                               binding_constraint_scan, binding_constraints, ci_error_correlation,
                               dispatch_ranges, evaluate_model, model_size_sweep, param_table)
from opflab.neural.fcc import FccModel
from opflab.pwl import CITable, ComplexityIndex, GeneratorCI, PiecewiseLinear
from opflab.solver import project_load_flow, solve_acopf
from opflab.synthetic import _network, kink6, vbind2
from opflab.training import TrainConfig


class _Shifted:
    """Ground truth with ``eps`` added to one generator's pg."""

    def __init__(self, ds, gen, eps):
        self.echo, self.gen, self.eps = TruthEcho(ds), gen, eps

    def predict(self, X):
        sp, _ = self.echo.predict(X)
        sp = sp.copy()
        sp[:, self.gen] += self.eps
        return sp, None


def test_truth_echo_scores_zero(kink_small):
    rep = evaluate_model(TruthEcho(kink_small), kink_small)
    assert rep.n_test == len(kink_small.test)
    assert rep.pred_error == 0.0 and rep.pred_error_pu == 0.0
    # the projection re-solves to tolerance, not bit-exactly
    assert rep.lf_error < 0.01
    assert rep.opt_gap < 1e-3
    assert rep.bound_violation < 1e-6 and rep.kcl_violation < 1e-6
    assert rep.projection_failures == 0


def test_one_pg_offset(kink_small):
    eps, gen = 1e-3, 5
    rep = evaluate_model(_Shifted(kink_small, gen, eps), kink_small)
    G = kink_small.net.n_gen
    assert rep.pred_error == pytest.approx(100 * eps / dispatch_ranges(kink_small)[gen] / G, rel=1e-9)
    assert rep.per_gen_error[gen] == pytest.approx(100 * eps / dispatch_ranges(kink_small)[gen], rel=1e-9)
    assert rep.kcl_violation is None


@pytest.mark.parametrize("m", range(3))
def test_projection_of_offset_stays_within_eps(kink_small, m):
    eps, net = 1e-3, kink_small.net
    k = int(kink_small.test[m])
    s = kink_small.samples[k]
    y = s.setpoints(net)
    yhat = y.copy()
    yhat[5] += eps
    res = project_load_flow(net, s.loads, yhat)
    assert res.converged
    assert np.linalg.norm(res.point.setpoints(net) - y) <= eps + 1e-5


def test_dispatch_range_floor(kink_small):
    rng = dispatch_ranges(kink_small)
    # units 0-2 sit at their cap across the sweep
    assert np.all(rng[:3] == RANGE_FLOOR)
    assert np.all(rng[3:] > RANGE_FLOOR)


def test_report_serialisation(kink_small):
    rep = evaluate_model(TruthEcho(kink_small), kink_small, project=False)
    assert np.isnan(rep.lf_error)
    d = json.loads(rep.to_json())
    assert d["n_test"] == rep.n_test
    lines = rep.to_csv().splitlines()
    assert lines[0] == "metric,value"
    assert any(line.startswith("gen_error_5,") for line in lines)
    assert isinstance(rep, EvalReport)


def test_predictor_shape_mismatch(kink_small):
    model = FccModel.init([12, 8, 5])
    with pytest.raises(ShapeMismatch, match="needs 12 -> 12"):
        Predictor(model, kink_small.net, "setpoints")


def _table(keys):
    f = PiecewiseLinear([0.0, 1.0], [0.0], 0.0)
    return CITable("t", [GeneratorCI(g, ComplexityIndex(p, w), w, f, 0.01, 0.0) for g, (p, w) in enumerate(keys)])


def test_ci_correlation_monotone():
    table = _table([(2, 0.5), (1, 0.0), (3, 0.1), (1, 0.2)])
    out = ci_error_correlation(table, [3.0, 1.0, 4.0, 2.0])
    assert out["rho"] == pytest.approx(1.0)
    assert out["order"] == [1, 3, 0, 2]
    assert [p["error"] for p in out["points"]] == [1.0, 2.0, 3.0, 4.0]


def test_ci_correlation_constant_errors():
    table = _table([(1, 0.0), (2, 0.5), (3, 0.1)])
    assert ci_error_correlation(table, [1.0, 1.0, 1.0])["rho"] == 0.0


def test_ci_correlation_ties_average():
    table = _table([(1, 0.0), (1, 0.0), (2, 0.1), (2, 0.3)])
    out = ci_error_correlation(table, [1.0, 2.0, 3.0, 4.0])
    # CI ranks (1.5, 1.5, 3, 4) against (1, 2, 3, 4)
    assert out["rho"] == pytest.approx(0.9486832980505138)


def test_ci_correlation_validation():
    with pytest.raises(ValueError):
        ci_error_correlation(_table([(1, 0.0), (2, 0.0), (3, 0.0)]), [1.0, 2.0])


def test_size_sweep_linear_fixture(lin_ds):
    widths = [8, 16, 32]
    rows = model_size_sweep(lin_ds, widths)
    assert len(rows) == len(widths) * lin_ds.net.n_gen
    # errors are percent of the dispatch range; saturated means below 1e-3 of it
    assert all(r["error"] / 100 < 1e-3 for r in rows)
    assert rows[0]["params"] < rows[1]["params"] < rows[2]["params"]


def test_size_sweep_duplicate_width_deterministic(lin_ds):
    rows = model_size_sweep(lin_ds, [8, 8], TrainConfig(epochs=20))
    assert rows[0]["error"] == rows[1]["error"]


def test_size_sweep_validation(lin_ds):
    with pytest.raises(ValueError):
        model_size_sweep(lin_ds, [8])
    with pytest.raises(ValueError):
        model_size_sweep(lin_ds, [8, 7])


def test_activation_comparison_shape_and_control(kink_small):
    cfg = TrainConfig(epochs=20)
    out = activation_comparison(kink_small, cfg, activations=("tanh", "tanh"))
    assert len(out["rows"]) == len(kink_small.test) * kink_small.net.n_gen
    alphas = [r["alpha"] for r in out["rows"]]
    assert alphas == sorted(alphas)
    pair = activation_comparison(kink_small, cfg, activations=("tanh",))
    assert out["mean_error"]["tanh"] == pair["mean_error"]["tanh"]


def test_relu_tracks_kinks_better(kink_small):
    out = activation_comparison(kink_small)
    assert out["mean_error"]["relu"] <= out["mean_error"]["tanh"]


def test_pinned_generator_flagged_everywhere(kink_small):
    scan = binding_constraint_scan(kink_small)
    for g in range(3):
        assert all(f"pmax[{g}]" in s["binding"] for s in scan["samples"])
        assert len(scan["intervals"][f"pmax[{g}]"]) == 1


def test_lossless_toy_has_no_binding_constraints():
    net = _network("flat", n=2, slack=0, pd=[0.0, 0.5], qd=[0.0, 0.0], gens=[(0, 0.0, 2.0, -2.0, 2.0, 0.0, 1.0, 0.0)],
                   branches=[(0, 1, 0.0, 0.1, 0.0)], vmin=0.5, vmax=1.5)
    assert binding_constraints(net, solve_acopf(net).point) == []


def test_voltage_bound_binds_above_nominal():
    ds = generate_dataset(vbind2(), 30, sigma=0.0, seed=0, T=2)
    scan = binding_constraint_scan(ds)
    runs = scan["intervals"]["vmin[2]"]
    assert len(runs) == 1
    alphas = np.sort(ds.alphas())
    left = int(np.searchsorted(alphas, runs[0][0]))
    first_above = int(np.searchsorted(alphas, 1.0))
    assert abs(left - first_above) <= 1
    assert runs[0][1] == alphas[-1]


def test_param_table(case30):
    rows = param_table({"case30": case30, "kink6": kink6()})
    r = rows[0]
    assert (r["n_bus"], r["n_gen"]) == (30, 6)
    assert r["fcc_params"] == 37812 and r["rnn_params"] == 3216
    assert r["ratio"] == pytest.approx(37812 / 3216)
