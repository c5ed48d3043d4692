"""Small hand-built networks used as fixtures and in the analysis runs.

``toy2``   two buses, one generator at the slack, one load; small enough for a
           brute-force oracle.
``kink6``  six generators on a ring with near-lossless lines. Three cheap units
           sit at their upper bound for every load level (single linear piece);
           the other three trace kinked trajectories as one saturates and
           another comes online along the load sweep.
``vbind2`` two buses where the load-bus voltage reaches its lower bound
           exactly at nominal demand; above nominal an expensive local unit
           must run to hold the voltage.
"""
from __future__ import annotations

import numpy as np

from opflab.network import PowerNetwork

_VMIN, _VMAX = 0.95, 1.05


def _network(name, *, n, slack, pd, qd, gens, branches, vmin=_VMIN, vmax=_VMAX):
    """Assemble a PowerNetwork from compact row lists.

    ``gens`` rows: (bus, pmin, pmax, qmin, qmax, c2, c1, c0) in pu and $/pu.
    ``branches`` rows: (from, to, r, x, b).
    """
    g = np.asarray(gens, dtype=float)
    br = np.asarray(branches, dtype=float)
    m = len(br)
    return PowerNetwork(
        name=name,
        base_mva=100.0,
        bus_ids=np.arange(1, n + 1),
        slack=slack,
        vmin=np.full(n, vmin),
        vmax=np.full(n, vmax),
        gs=np.zeros(n),
        bs=np.zeros(n),
        pd=np.asarray(pd, dtype=float),
        qd=np.asarray(qd, dtype=float),
        gen_bus=g[:, 0].astype(int),
        pmin=g[:, 1],
        pmax=g[:, 2],
        qmin=g[:, 3],
        qmax=g[:, 4],
        c2=g[:, 5],
        c1=g[:, 6],
        c0=g[:, 7],
        f_bus=br[:, 0].astype(int),
        t_bus=br[:, 1].astype(int),
        r=br[:, 2],
        x=br[:, 3],
        b=br[:, 4],
        tap=np.zeros(m),
        shift=np.zeros(m),
        rate=np.full(m, np.inf),
        angle_limit=np.full(m, np.pi / 2),
    )


def toy2(load: float = 0.5) -> PowerNetwork:
    """Slack generator (linear cost, c1 = 1) feeding ``load`` pu over r=0.01, x=0.1."""
    return _network(
        "toy2",
        n=2,
        slack=0,
        pd=[0.0, load],
        qd=[0.0, 0.0],
        gens=[(0, 0.0, 2.0, -2.0, 2.0, 0.0, 1.0, 0.0)],
        branches=[(0, 1, 0.01, 0.1, 0.0)],
    )


def kink6() -> PowerNetwork:
    """Six-generator ring with three pinned and three kinked dispatch trajectories.

    Nominal demand is 3.0 pu spread over the six buses. Units 0-2 are cheap
    and capped at 0.3 pu each. Unit 3 shares load with unit 5 until it caps
    at 0.95 pu (near 0.93x load); unit 4 has a higher marginal cost and comes
    online near 1.07x load.
    """
    pd = np.array([0.4, 0.6, 0.5, 0.5, 0.6, 0.4])
    qd = 0.2 * pd
    gens = [
        (0, 0.0, 0.3, -1.0, 1.0, 0.0, 1.0, 0.0),
        (1, 0.0, 0.3, -1.0, 1.0, 0.0, 2.0, 0.0),
        (2, 0.0, 0.3, -1.0, 1.0, 0.0, 3.0, 0.0),
        (3, 0.0, 0.95, -1.0, 1.0, 1.0, 10.0, 0.0),
        (4, 0.0, 2.0, -1.0, 1.0, 1.0, 12.72, 0.0),
        (5, 0.0, 5.0, -2.0, 2.0, 1.0, 10.0, 0.0),
    ]
    ring = [(k, (k + 1) % 6, 0.002, 0.02, 0.0) for k in range(6)]
    return _network("kink6", n=6, slack=5, pd=pd, qd=qd, gens=gens, branches=ring)


def vbind2() -> PowerNetwork:
    """Two-bus case whose load-bus voltage hits ``vmin`` exactly at nominal demand.

    The nominal load has a fixed 0.2 reactive-to-active ratio and is scaled
    so that bus 0 at ``vmax`` delivers it with bus 1 exactly at ``vmin``.
    Below nominal the bound is slack; above nominal it binds. The unit at
    bus 1 has no reactive range and costs far more than the slack unit.
    """
    r, x = 0.02, 0.2
    yc = np.conj(1.0 / complex(r, x))
    d = complex(1.0, 0.2)
    # with bus 1 as angle reference: conj(V0) = v1 + s * d / (conj(y) * v1); solve |V0| = vmax for s
    c = d / (yc * _VMIN)
    s = np.roots([abs(c) ** 2, 2 * _VMIN * c.real, _VMIN**2 - _VMAX**2])
    s = float(np.min(s[(np.abs(s.imag) < 1e-12) & (s.real > 0)].real))
    sd = s * d
    return _network(
        "vbind2",
        n=2,
        slack=0,
        pd=[0.0, sd.real],
        qd=[0.0, sd.imag],
        gens=[
            (0, 0.0, 5.0, -5.0, 5.0, 0.0, 1.0, 0.0),
            (1, 0.0, 2.0, 0.0, 0.0, 0.0, 50.0, 0.0),
        ],
        branches=[(0, 1, r, x, 0.0)],
    )


SYNTHETIC = {"toy2": toy2, "kink6": kink6, "vbind2": vbind2}
