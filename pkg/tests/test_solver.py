import numpy as np
import pytest

from opflab.case_parser import builtin_case
from opflab.dataset import perturb_loads
from opflab.network import FAMILIES, LoadVector, constraint_violations, violation_vectors
from opflab.solver import (SolveResult, SolveStatus, SolverOptions, project_load_flow, sample_trajectory,
                           solve_acopf, trajectory_indices)
from opflab.synthetic import SYNTHETIC, kink6, toy2

# brute-force grid over the load-bus voltage (step 1e-3) with the slack voltage
# in closed form; a 1e-5 grid moves the value by 5e-7
TOY2_GRID_OPTIMUM = 0.5022937126583579
# independent reference solve of case30 at nominal load
CASE30_REFERENCE = 576.8923361980285


def test_toy2_matches_grid_oracle():
    res = solve_acopf(toy2())
    assert res.converged
    assert res.objective == pytest.approx(TOY2_GRID_OPTIMUM, abs=1e-3)
    # local optimum never beats the oracle by more than its resolution
    assert res.objective >= TOY2_GRID_OPTIMUM - 1e-3


def test_zero_demand():
    net = toy2(load=0.0)
    res = solve_acopf(net)
    assert res.converged
    assert abs(res.point.pg[0]) < 1e-5
    assert res.objective == pytest.approx(float(net.c0.sum()), abs=1e-5)


def test_case30_reference_objective(case30):
    res = solve_acopf(case30)
    assert res.converged
    assert abs(res.objective - CASE30_REFERENCE) / CASE30_REFERENCE < 1e-3


def test_converged_invariants(case30):
    res = solve_acopf(case30)
    rep = constraint_violations(case30, res.point, case30.nominal_loads)
    assert all(rep.max[f] <= 1e-6 for f in FAMILIES)
    assert res.trajectory
    last = res.trajectory[-1]
    assert np.array_equal(last.v, res.point.v) and np.array_equal(last.pg, res.point.pg)
    assert abs(res.point.theta[case30.slack]) < 1e-12


def _violation_norms(net, res, loads):
    out = []
    for op in res.trajectory:
        vec = violation_vectors(net, op, loads)
        out.append(np.sqrt(sum(float(np.sum(np.asarray(x) ** 2)) for x in vec.values())))
    return out


@pytest.mark.parametrize("name,seed", [("kink6", 0), ("kink6", 1), ("toy2", 0), ("vbind2", 0),
                                       ("case30_loose", 0), ("case30_loose", 1)])
def test_monotone_trajectory_tail(name, seed):
    net = SYNTHETIC[name]() if name in SYNTHETIC else builtin_case(name)
    rng = np.random.default_rng(seed)
    loads = perturb_loads(net.nominal_loads, rng.uniform(0.8, 1.2), seed=rng)
    res = solve_acopf(net, loads)
    assert res.converged
    norms = _violation_norms(net, res, loads)
    tail = norms[int(np.floor(0.75 * len(norms))):]
    # below tol_feas the norm is settled; fluctuations there are rounding
    assert all(b <= max(a, 1e-6) for a, b in zip(tail, tail[1:]))


def test_deterministic_trajectory():
    a = solve_acopf(kink6())
    b = solve_acopf(kink6())
    assert len(a.trajectory) == len(b.trajectory)
    assert all(np.array_equal(p.v, q.v) and np.array_equal(p.pg, q.pg) for p, q in zip(a.trajectory, b.trajectory))


def test_result_round_trip():
    res = solve_acopf(toy2())
    back = SolveResult.from_dict(res.to_dict())
    assert back.status == SolveStatus.CONVERGED
    assert back.objective == res.objective
    assert np.array_equal(back.trajectory[-1].v, res.trajectory[-1].v)


def test_iteration_limit_flagged(case30):
    res = solve_acopf(case30, opts=SolverOptions(max_iter=3))
    assert res.status == SolveStatus.ITER_LIMIT
    assert not res.converged


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(tol_feas=0.0)
    with pytest.raises(ValueError):
        SolverOptions(tol_opt=-1.0)


def test_load_length_checked(case30):
    with pytest.raises(ValueError):
        solve_acopf(case30, LoadVector(np.zeros(3), np.zeros(3)))


def test_projection_idempotent(case30):
    res = solve_acopf(case30)
    y = res.point.setpoints(case30)
    proj = project_load_flow(case30, case30.nominal_loads, y)
    assert proj.converged
    assert np.linalg.norm(proj.point.setpoints(case30) - y) < 1e-5


def test_projection_enforces_upper_bound(case30):
    res = solve_acopf(case30)
    y = res.point.setpoints(case30)
    y[1] = case30.pmax[1] + 0.3
    proj = project_load_flow(case30, case30.nominal_loads, y)
    assert proj.converged
    assert proj.point.pg[1] <= case30.pmax[1] + 1e-6
    rep = constraint_violations(case30, proj.point, case30.nominal_loads)
    assert rep.worst <= 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_projection_no_farther_than_feasible_origin(seed):
    net = kink6()
    res = solve_acopf(net)
    y = res.point.setpoints(net)
    eps = np.random.default_rng(seed).normal(scale=0.02, size=y.shape)
    proj = project_load_flow(net, net.nominal_loads, y + eps)
    assert proj.converged
    dist = np.linalg.norm(proj.point.setpoints(net) - (y + eps))
    assert dist <= np.linalg.norm(eps) + 1e-6


def test_projection_shape_checked(case30):
    with pytest.raises(ValueError):
        project_load_flow(case30, case30.nominal_loads, np.zeros(5))


@pytest.mark.parametrize("length,T,expected", [
    (10, 5, [1, 3, 5, 7, 9]),
    (3, 5, [0, 0, 1, 1, 2]),
    (7, 1, [6]),
    (1, 3, [0, 0, 0]),
])
def test_trajectory_indices(length, T, expected):
    assert trajectory_indices(length, T) == expected


def test_sample_trajectory_ends_at_solution():
    net = kink6()
    res = solve_acopf(net)
    snaps = sample_trajectory(res, 5, net)
    assert len(snaps) == 5
    assert np.array_equal(snaps[-1], res.point.setpoints(net))
    only = sample_trajectory(res, 1, net)
    assert len(only) == 1 and np.array_equal(only[0], res.point.setpoints(net))
    with pytest.raises(ValueError):
        sample_trajectory(res, 0, net)
