"""Acceptance suite: one test per criterion, at the stated tolerances.

The data-driven criteria share N = 1000 datasets and trained models through
session fixtures, so the whole module takes several minutes.
"""
import time

import numpy as np
import pytest
from _gradcheck import BLOCKS, run_check

from opflab.case_parser import builtin_case
from opflab.cli import main
from opflab.dataset import generate_dataset, split_dataset
from opflab.evaluation import Predictor, ci_error_correlation, evaluate_model, param_table
from opflab.network import FAMILIES, constraint_violations, kcl_residual
from opflab.neural.fcc import fcc_param_formula
from opflab.neural.rnn import rnn_param_formula
from opflab.pwl import PiecewiseLinear, fit_pwl, generator_ci_table, pwl_approx_error_bound, relu_capacity_bounds
from opflab.solver import solve_acopf
from opflab.synthetic import kink6, toy2
from opflab.training import TrainConfig, train

# numpy < 2 only has trapz
_trapezoid = getattr(np, "trapezoid", None) or np.trapz
TOY2_GRID_OPTIMUM = 0.5022937126583579
N = 1000
SEEDS = (0, 1, 2)


def _dataset(net):
    t0 = time.perf_counter()
    ds = split_dataset(generate_dataset(net, N, seed=0), 0.8, 0)
    return ds, time.perf_counter() - t0


@pytest.fixture(scope="session")
def loose30():
    # IEEE-30 with doubled branch ratings: the stock ratings make a third of
    # the draws above nominal load infeasible
    return _dataset(builtin_case("case30_loose"))


@pytest.fixture(scope="session")
def kink1000():
    return _dataset(kink6())[0]


_MODELS = {}


def _trained(ds, kind, seed, **kw):
    key = (ds.net.name, kind, seed, tuple(sorted(kw.items())))
    if key not in _MODELS:
        _MODELS[key] = train(ds, TrainConfig(kind=kind, seed=seed, **kw))[0]
    return _MODELS[key]


def _report(ds, model, head, project=True):
    return evaluate_model(Predictor(model, ds.net, head), ds, project=project)


def test_c01_solver_correctness():
    t0 = time.perf_counter()
    net = builtin_case("case30")
    ds = generate_dataset(net, 20, seed=0, T=1)
    # generation keeps converged solves only; check the stored optima directly
    for s in ds.samples:
        assert np.abs(kcl_residual(net, s.point, s.loads)).max() < 1e-6
        rep = constraint_violations(net, s.point, s.loads)
        assert all(rep.max[f] < 1e-6 for f in FAMILIES if f != "kcl")
    toy = solve_acopf(toy2())
    assert abs(toy.objective - TOY2_GRID_OPTIMUM) <= 1e-3
    assert time.perf_counter() - t0 < 300


@pytest.mark.slow
def test_c02_ieee30_table_row(loose30):
    ds, gen_time = loose30
    t0 = time.perf_counter()
    table = generator_ci_table(ds, tol=0.01)
    assert table.share(1) == 100.0
    rep = _report(ds, _trained(ds, "fcc", 0), "setpoints")
    assert rep.projection_failures == 0
    assert rep.pred_error <= 1.0
    assert rep.lf_error <= 1.0
    assert rep.opt_gap <= 0.05
    assert gen_time + time.perf_counter() - t0 < 30 * 60


@pytest.mark.slow
def test_c03_ci_error_correlation(kink1000):
    table = generator_ci_table(kink1000)
    ps = [r.ci.p for r in table.rows]
    assert sum(p == 1 for p in ps) == 3 and sum(p >= 2 for p in ps) == 3
    for seed in SEEDS:
        rep = _report(kink1000, _trained(kink1000, "fcc", seed), "setpoints", project=False)
        assert ci_error_correlation(table, rep.per_gen_error)["rho"] > 0.5


def test_c04_approximation_bound():
    rng = np.random.default_rng(0)
    x = np.linspace(0.0, 1.0, 401)
    fine = np.arange(0.0, 1.0 + 5e-5, 1e-4)
    for _ in range(100):
        inner = np.sort(rng.uniform(0.05, 0.95, 3))
        while np.min(np.diff(inner)) < 1e-3:
            inner = np.sort(rng.uniform(0.05, 0.95, 3))
        f = PiecewiseLinear(np.concatenate([[0.0], inner, [1.0]]), rng.uniform(-2, 2, 4), rng.uniform(-1, 1))
        g = fit_pwl(x, f(x), max_pieces=2, tol=0.0)
        gap = _trapezoid(np.abs(f(fine) - g(fine)), fine)
        assert gap <= pwl_approx_error_bound(f, 2)


def test_c05_capacity_calculator():
    assert relu_capacity_bounds(4, 1, 1)["min_size"] == 1.0
    assert relu_capacity_bounds(1, 1, 2)["max_pieces"] == 4.0


def _paired_violations(ds):
    wins = 0
    for seed in SEEDS:
        base = _report(ds, _trained(ds, "fcc-constrained", seed, lambda_init=0.0, rho=0.0), "full", False)
        cons = _report(ds, _trained(ds, "fcc-constrained", seed), "full", False)
        wins += cons.bound_violation <= base.bound_violation and cons.kcl_violation <= base.kcl_violation
    return wins


@pytest.mark.slow
def test_c06_constraint_aware_training(loose30, kink1000):
    assert _paired_violations(loose30[0]) >= 2
    assert _paired_violations(kink1000) >= 2


@pytest.mark.slow
def test_c07_rnn_robustness(kink1000):
    wins = 0
    for seed in SEEDS:
        fcc = _report(kink1000, _trained(kink1000, "fcc-constrained", seed), "full")
        rnn = _report(kink1000, _trained(kink1000, "rnn", seed), "full")
        wins += rnn.lf_error <= fcc.lf_error
    assert wins >= 2


# published bus and generator counts of the larger IEEE benchmark cases
PUBLISHED = {"case118": (118, 54), "case162": (162, 12), "case300": (300, 69)}


def test_c08_parameter_footprint():
    rows = param_table({name: builtin_case(name) for name in ("case30", "case30_loose")})
    for r in rows:
        assert r["n_bus"] >= 30 and r["ratio"] >= 10
    for n, G in PUBLISHED.values():
        fcc = fcc_param_formula(n, 2 * G)
        rnn = rnn_param_formula(2 * n, 2 * G + 2 * n, 2 * G, 8, 8)
        assert fcc / rnn >= 10


@pytest.mark.parametrize("seed", range(5))
def test_c09_gradient_integrity(seed):
    for block in BLOCKS:
        assert run_check(block, seed) < 1e-4, block


def test_c10_determinism(tmp_path):
    def run(d):
        d.mkdir()
        ds = str(d / "dataset.jsonl")
        assert main(["gen", "--case", "kink6", "-N", "20", "--seed", "4", "--out", ds]) == 0
        for kind in ("fcc", "fcc-constrained", "rnn"):
            out = str(d / kind)
            assert main(["train", ds, "--kind", kind, "--epochs", "15", "--seed", "4", "--out", out]) == 0
            assert main(["eval", f"{out}/checkpoint.json", ds]) == 0
        return sorted(p for p in d.rglob("*") if p.is_file())

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    assert [p.relative_to(tmp_path / "a") for p in a] == [p.relative_to(tmp_path / "b") for p in b]
    assert len(a) == 1 + 3 * 4
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
