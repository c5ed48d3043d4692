import numpy as np
import pytest

from opflab.dataset import OpfDataset, generate_dataset, perturb_loads, split_dataset
from opflab.errors import NegativeLoadFactor
from opflab.network import FAMILIES, LoadVector, constraint_violations
from opflab.synthetic import kink6, toy2


def test_sigma_zero_is_pure_scaling(case30):
    base = case30.nominal_loads
    out = perturb_loads(base, 1.13, sigma=0.0, seed=4)
    assert np.allclose(out.pd, 1.13 * base.pd, rtol=0, atol=1e-14)
    assert np.allclose(out.qd, 1.13 * base.qd, rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_sum_invariant(case30, seed):
    base = case30.nominal_loads
    alpha = 0.8 + 0.04 * seed
    out = perturb_loads(base, alpha, seed=seed)
    assert abs(out.pd.sum() - alpha * base.pd.sum()) < 1e-9
    assert abs(out.qd.sum() - alpha * base.qd.sum()) < 1e-9
    assert np.all(out.pd[base.pd == 0] == 0)


def test_mean_factor_monte_carlo(case30):
    base = case30.nominal_loads
    rng = np.random.default_rng(0)
    nz = base.pd > 0
    ratios = np.array([(perturb_loads(base, 1.0, seed=rng).pd[nz] / base.pd[nz]).mean() for _ in range(10000)])
    # per-bus factors have std 0.05; a draw averages over the loaded buses
    assert abs(ratios.mean() - 1.0) < 3 * 0.05 / np.sqrt(10000)


def test_negative_factor_raises():
    # with 60 loads a redraw has all factors positive with probability ~2^-60
    base = LoadVector(np.ones(60), np.full(60, 0.2))
    with pytest.raises(NegativeLoadFactor):
        perturb_loads(base, 0.01, sigma=10.0, seed=0)


def test_bad_alpha():
    with pytest.raises(ValueError):
        perturb_loads(toy2().nominal_loads, -1.0)


@pytest.fixture(scope="module")
def toy_ds():
    return generate_dataset(toy2(), 10, seed=7, T=3)


def test_toy2_invariants(toy_ds):
    net = toy_ds.net
    base = net.nominal_loads
    assert len(toy_ds) == 10
    for s in toy_ds.samples:
        assert abs(s.loads.pd.sum() - s.alpha * base.pd.sum()) < 1e-9
        assert 0.8 <= s.alpha <= 1.2
        rep = constraint_violations(net, s.point, s.loads)
        assert all(rep.max[f] <= 1e-6 for f in FAMILIES)
        assert len(s.trajectory) == 3
        assert np.array_equal(s.trajectory[-1].pg, s.point.pg)


def test_sorted_by_demand(toy_ds):
    d = toy_ds.total_demand()
    assert np.all(np.diff(d) >= 0)


def test_same_seed_byte_identical(toy_ds):
    again = generate_dataset(toy2(), 10, seed=7, T=3)
    assert again.dumps() == toy_ds.dumps()


def test_serial_equals_parallel():
    a = generate_dataset(kink6(), 8, seed=2, T=4)
    b = generate_dataset(kink6(), 8, seed=2, T=4, workers=2)
    assert a.dumps() == b.dumps()


def test_file_round_trip(toy_ds, tmp_path):
    ds = split_dataset(toy_ds, 0.8, 1)
    p = tmp_path / "d.jsonl"
    ds.save(p)
    back = OpfDataset.load(p)
    assert back.dumps() == ds.dumps()
    assert np.array_equal(back.train, ds.train)
    assert back.net.equals(ds.net)


def test_too_small():
    with pytest.raises(ValueError):
        generate_dataset(toy2(), 4)


def test_split_sizes(toy_ds):
    ds = split_dataset(toy_ds, 0.8, 0)
    assert len(ds.train) == 8 and len(ds.test) == 2
    assert set(ds.train).isdisjoint(ds.test)
    assert sorted(np.concatenate([ds.train, ds.test])) == list(range(10))
    again = split_dataset(toy_ds, 0.8, 0)
    assert np.array_equal(again.train, ds.train)


def test_split_ratio_validated(toy_ds):
    with pytest.raises(ValueError):
        split_dataset(toy_ds, 1.0)


def test_array_views(toy_ds):
    net = toy_ds.net
    assert toy_ds.setpoints().shape == (10, 2 * net.n_gen)
    assert toy_ds.full_states().shape == (10, 2 * net.n_gen + 2 * net.n_bus)
    assert toy_ds.trajectories().shape[:2] == (10, 3)
    assert toy_ds.features().shape[0] == 10


def test_bad_header():
    with pytest.raises(ValueError):
        OpfDataset.loads('{"kind": "other"}\n')
    with pytest.raises(ValueError):
        OpfDataset.loads("")
