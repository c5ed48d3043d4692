"""Shared fixtures: small networks, hand-written case text and cached datasets."""
from __future__ import annotations

import numpy as np
import pytest

from opflab.case_parser import builtin_case
from opflab.dataset import OpfDataset, OpfSample, generate_dataset, split_dataset
from opflab.network import LoadVector, OperatingPoint
from opflab.synthetic import kink6, toy2

# two buses, one line, one generator at the reference bus; MW units
TWO_BUS_CASE = """\
function mpc = twobus
% hand-written fixture
mpc.version = '2';
mpc.baseMVA = 100;

%% bus data
%	bus_i	type	Pd	Qd	Gs	Bs	area	Vm	Va	baseKV	zone	Vmax	Vmin
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.05	0.95;
	2	1	50	10	0	0	1	1	0	135	1	1.05	0.95;
];

%% generator data
%	bus	Pg	Qg	Qmax	Qmin	Vg	mBase	status	Pmax	Pmin
mpc.gen = [
	1	0	0	100	-100	1	100	1	80	0;
];

%% branch data
%	fbus	tbus	r	x	b	rateA	rateB	rateC	ratio	angle	status	angmin	angmax
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1	-360	360;
];

%% cost data
mpc.gencost = [
	2	0	0	3	0.01	2	3;
];
"""


@pytest.fixture(scope="session")
def case30():
    return builtin_case("case30")


@pytest.fixture
def two_bus_text():
    return TWO_BUS_CASE


def linear_dataset(N: int = 80, seed: int = 0, noise: float = 0.0) -> OpfDataset:
    """Samples on the toy2 network whose set-points are exact affine maps of the loads.

    Only the learning code consumes these; the points are not physically
    feasible.
    """
    net = toy2()
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(N):
        a = rng.uniform(0.8, 1.2)
        pd = np.array([0.0, 0.5 * a])
        qd = np.array([0.0, 0.1 * a])
        pg = np.array([0.02 + 1.1 * pd[1] + noise * rng.normal()])
        qg = np.array([0.5 * qd[1]])
        v = np.array([1.0 + 0.05 * pd[1], 1.0 - 0.02 * pd[1]])
        th = np.array([0.0, -0.1 * pd[1]])
        op = OperatingPoint(v, th, pg, qg)
        samples.append(OpfSample(a, LoadVector(pd, qd), op, [op] * 3, float(pg[0]), 1))
    return split_dataset(OpfDataset(net, samples, seed, {"N": N, "T": 3}), 0.8, seed)


@pytest.fixture(scope="session")
def lin_ds():
    return linear_dataset()


@pytest.fixture(scope="session")
def kink_small():
    return split_dataset(generate_dataset(kink6(), 40, seed=3, T=5), 0.8, 3)
