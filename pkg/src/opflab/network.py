"""Power network description and AC physics in polar coordinates.

All quantities are per-unit on the system base. Branches are modelled as
two directed arcs, each carrying a self and a mutual admittance so that

    S_ij = conj(Y_ii) |V_i|^2 + conj(Y_ij) V_i conj(V_j)

which reduces to ``conj(y) |V_i|^2 - conj(y) V_i conj(V_j)`` for a plain
series admittance ``y`` (no charging, no tap). Functions here broadcast over
leading batch dimensions of ``v``/``theta``/``pg``/``qg`` so the training
losses can reuse them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from opflab.errors import AngleGuardError, InvalidNetwork

FAMILIES = ("voltage", "angle", "generator", "thermal", "kcl")


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    """Immutable per-unit description of a grid.

    Bus, generator and branch data are stored column-wise as numpy arrays.
    ``r``, ``x``, ``b``, ``tap`` and ``shift`` keep the raw branch parameters
    (shift in degrees) so the case can be written back out.
    """

    name: str
    base_mva: float
    bus_ids: np.ndarray
    slack: int
    vmin: np.ndarray
    vmax: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    gen_bus: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    c2: np.ndarray
    c1: np.ndarray
    c0: np.ndarray
    f_bus: np.ndarray
    t_bus: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    tap: np.ndarray
    shift: np.ndarray
    rate: np.ndarray
    angle_limit: np.ndarray
    yff: np.ndarray = field(init=False)
    yft: np.ndarray = field(init=False)
    ytf: np.ndarray = field(init=False)
    ytt: np.ndarray = field(init=False)

    def __post_init__(self):
        ints = ("bus_ids", "gen_bus", "f_bus", "t_bus")
        for name in self.__dataclass_fields__:
            if name in ("name", "base_mva", "slack") or not self.__dataclass_fields__[name].init:
                continue
            object.__setattr__(self, name, _frozen(getattr(self, name), int if name in ints else float))
        object.__setattr__(self, "slack", int(self.slack))
        object.__setattr__(self, "base_mva", float(self.base_mva))

        n = len(self.bus_ids)
        for name in ("vmin", "vmax", "gs", "bs", "pd", "qd"):
            if len(getattr(self, name)) != n:
                raise InvalidNetwork(f"bus field {name} has wrong length")
        if not 0 <= self.slack < n:
            raise InvalidNetwork("slack bus index out of range")
        bad = np.flatnonzero(self.vmin > self.vmax)
        if bad.size:
            raise InvalidNetwork(f"voltage bounds v_min > v_max at bus id(s) {self.bus_ids[bad].tolist()}")
        if np.any(self.pmin > self.pmax) or np.any(self.qmin > self.qmax):
            g = np.flatnonzero((self.pmin > self.pmax) | (self.qmin > self.qmax))
            raise InvalidNetwork(f"generator lower bound exceeds upper bound for generator(s) {g.tolist()}")
        if np.any(self.rate <= 0):
            raise InvalidNetwork("thermal limits must be positive (use inf for unlimited)")
        if np.any(self.angle_limit <= 0) or np.any(self.angle_limit > np.pi / 2 + 1e-12):
            raise InvalidNetwork("angle limits must lie in (0, pi/2]")
        for arr in (self.gen_bus, self.f_bus, self.t_bus):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise InvalidNetwork("element references a bus index out of range")

        z = self.r + 1j * self.x
        ys = 1.0 / z
        ratio = np.where(self.tap == 0.0, 1.0, self.tap)
        t = ratio * np.exp(1j * np.deg2rad(self.shift))
        ytt = ys + 0.5j * self.b
        yff = ytt / (t * np.conj(t))
        yft = -ys / np.conj(t)
        ytf = -ys / t
        for name, val in (("yff", yff), ("yft", yft), ("ytf", ytf), ("ytt", ytt)):
            object.__setattr__(self, name, _frozen(val, complex))

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_gen(self) -> int:
        return len(self.gen_bus)

    @property
    def n_branch(self) -> int:
        return len(self.f_bus)

    # directed arcs: forward arcs first, then the reversed ones
    @property
    def arc_from(self):
        return np.concatenate([self.f_bus, self.t_bus])

    @property
    def arc_to(self):
        return np.concatenate([self.t_bus, self.f_bus])

    @property
    def arc_yself(self):
        return np.concatenate([self.yff, self.ytt])

    @property
    def arc_ymut(self):
        return np.concatenate([self.yft, self.ytf])

    @property
    def arc_rate(self):
        return np.concatenate([self.rate, self.rate])

    @property
    def nominal_loads(self) -> "LoadVector":
        return LoadVector(self.pd.copy(), self.qd.copy())

    def equals(self, other: "PowerNetwork", rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        """Structural equality up to floating point round-off."""
        if self.n_bus != other.n_bus or self.n_gen != other.n_gen or self.n_branch != other.n_branch:
            return False
        if self.slack != other.slack:
            return False
        for name in self.__dataclass_fields__:
            if name == "name":
                continue
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray):
                if a.dtype.kind in "iu":
                    if not np.array_equal(a, b):
                        return False
                elif not np.allclose(a, b, rtol=rtol, atol=atol, equal_nan=True):
                    return False
            elif a != b and not np.isclose(a, b, rtol=rtol, atol=atol):
                return False
        return True


@dataclass
class OperatingPoint:
    """Full AC state: bus voltage magnitudes/angles and generator dispatch."""

    v: np.ndarray
    theta: np.ndarray
    pg: np.ndarray
    qg: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.pg = np.asarray(self.pg, dtype=float)
        self.qg = np.asarray(self.qg, dtype=float)

    def check(self, net: PowerNetwork):
        if self.v.shape[-1] != net.n_bus or self.theta.shape[-1] != net.n_bus:
            raise InvalidNetwork("operating point bus dimension does not match network")
        if self.pg.shape[-1] != net.n_gen or self.qg.shape[-1] != net.n_gen:
            raise InvalidNetwork("operating point generator dimension does not match network")
        if np.any(np.abs(self.theta[..., net.slack]) > 1e-12):
            raise InvalidNetwork("reference bus angle must be zero")

    def setpoints(self, net: PowerNetwork) -> np.ndarray:
        """(pg, v at each generator's bus) stacked into one vector."""
        return np.concatenate([self.pg, self.v[..., net.gen_bus]], axis=-1)

    def to_dict(self) -> dict:
        return {"v": self.v.tolist(), "theta": self.theta.tolist(), "pg": self.pg.tolist(), "qg": self.qg.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "OperatingPoint":
        return cls(d["v"], d["theta"], d["pg"], d["qg"])


@dataclass
class LoadVector:
    pd: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.pd = np.asarray(self.pd, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if self.pd.shape != self.qd.shape:
            raise InvalidNetwork("active and reactive demand vectors differ in length")

    @property
    def sd(self) -> np.ndarray:
        return self.pd + 1j * self.qd

    def features(self) -> np.ndarray:
        """Model input layout: active demands followed by reactive demands."""
        return np.concatenate([self.pd, self.qd])


# ---------------------------------------------------------------------------
# flows


def arc_flows(net: PowerNetwork, v, theta) -> np.ndarray:
    """Complex flow on every directed arc, shape ``(..., 2 * n_branch)``."""
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    i, j = net.arc_from, net.arc_to
    vi, vj = v[..., i], v[..., j]
    delta = theta[..., i] - theta[..., j]
    return np.conj(net.arc_yself) * vi**2 + np.conj(net.arc_ymut) * vi * vj * np.exp(1j * delta)


def branch_flow(net: PowerNetwork, op: OperatingPoint, k: int, direction: str = "forward") -> complex:
    if direction == "forward":
        i, j, ys, ym = net.f_bus[k], net.t_bus[k], net.yff[k], net.yft[k]
    elif direction == "reverse":
        i, j, ys, ym = net.t_bus[k], net.f_bus[k], net.ytt[k], net.ytf[k]
    else:
        raise ValueError(f"direction must be 'forward' or 'reverse', got {direction!r}")
    vi = op.v[i] * np.exp(1j * op.theta[i])
    vj = op.v[j] * np.exp(1j * op.theta[j])
    return complex(np.conj(ys) * abs(vi) ** 2 + np.conj(ym) * vi * np.conj(vj))


def _scatter_buses(net: PowerNetwork, idx, values, n_bus):
    """Sum ``values[..., k]`` into bus ``idx[k]`` (batched)."""
    out = np.zeros(values.shape[:-1] + (n_bus,), dtype=values.dtype)
    # np.add.at does not broadcast over leading axes the way we need; use a one-hot matmul
    onehot = np.zeros((len(idx), n_bus))
    onehot[np.arange(len(idx)), idx] = 1.0
    out += values @ onehot
    return out


def kcl_residual(net: PowerNetwork, op: OperatingPoint, loads: LoadVector) -> np.ndarray:
    """Per-bus complex power mismatch; zero at any point satisfying KCL."""
    sg = np.asarray(op.pg) + 1j * np.asarray(op.qg)
    gen_inj = _scatter_buses(net, net.gen_bus, sg, net.n_bus)
    flows = arc_flows(net, op.v, op.theta)
    out_flow = _scatter_buses(net, net.arc_from, flows, net.n_bus)
    shunt = (net.gs - 1j * net.bs) * np.asarray(op.v) ** 2
    return gen_inj - loads.sd - shunt - out_flow


def dispatch_cost(net: PowerNetwork, pg) -> float:
    pg = np.asarray(pg, dtype=float)
    if pg.shape[-1] != net.n_gen:
        raise InvalidNetwork("pg length does not match generator count")
    return np.sum(net.c2 * pg**2 + net.c1 * pg + net.c0, axis=-1)


def angle_differences(net: PowerNetwork, theta) -> np.ndarray:
    """theta_f - theta_t per branch, wrapped into (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    d = theta[..., net.f_bus] - theta[..., net.t_bus]
    return np.angle(np.exp(1j * d))


def check_angle_guard(net: PowerNetwork, theta):
    d = np.abs(angle_differences(net, theta))
    if d.size and d.max() > np.pi / 2:
        k = int(np.argmax(d))
        raise AngleGuardError(f"branch {k} angle difference {d.max():.4f} rad exceeds pi/2")


# ---------------------------------------------------------------------------
# violations


def violation_vectors(net: PowerNetwork, op: OperatingPoint, loads: LoadVector) -> Dict[str, np.ndarray]:
    """Absolute violation per constraint, grouped by family."""
    v = np.asarray(op.v)
    volt = np.maximum(v - net.vmax, 0) + np.maximum(net.vmin - v, 0)
    ang = np.maximum(np.abs(angle_differences(net, op.theta)) - net.angle_limit, 0)
    pg, qg = np.asarray(op.pg), np.asarray(op.qg)
    gen = np.concatenate(
        [
            np.maximum(pg - net.pmax, 0) + np.maximum(net.pmin - pg, 0),
            np.maximum(qg - net.qmax, 0) + np.maximum(net.qmin - qg, 0),
        ],
        axis=-1,
    )
    smag = np.abs(arc_flows(net, op.v, op.theta))
    therm = np.maximum(smag - net.arc_rate, 0)
    kcl = np.abs(kcl_residual(net, op, loads))
    return {"voltage": volt, "angle": ang, "generator": gen, "thermal": therm, "kcl": kcl}


@dataclass
class ViolationReport:
    """Max and mean absolute violation per constraint family (pu).

    ``bound_mean`` pools the voltage and generator bound entries, the
    set-point bound column of the comparison tables.
    """

    max: Dict[str, float]
    mean: Dict[str, float]
    bound_mean: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max.values())

    def to_dict(self) -> dict:
        return {"max": dict(self.max), "mean": dict(self.mean), "bound_mean": self.bound_mean}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def constraint_violations(net: PowerNetwork, op: OperatingPoint, loads: LoadVector) -> ViolationReport:
    vecs = violation_vectors(net, op, loads)
    mx, mean = {}, {}
    for fam in FAMILIES:
        a = vecs[fam]
        mx[fam] = float(a.max()) if a.size else 0.0
        mean[fam] = float(a.mean()) if a.size else 0.0
    pooled = np.concatenate([vecs["voltage"], vecs["generator"]])
    return ViolationReport(mx, mean, float(pooled.mean()) if pooled.size else 0.0)


# ---------------------------------------------------------------------------
# derivatives of arc flows


@dataclass
class ArcPartials:
    """Arc flows and their derivatives w.r.t. (theta_i, theta_j, v_i, v_j).

    ``dp``/``dq`` have shape ``(..., n_arc, 4)``; ``d2p``/``d2q`` (optional)
    ``(..., n_arc, 4, 4)``.
    """

    p: np.ndarray
    q: np.ndarray
    dp: np.ndarray
    dq: np.ndarray
    d2p: Optional[np.ndarray] = None
    d2q: Optional[np.ndarray] = None


def arc_partials(net: PowerNetwork, v, theta, second: bool = False) -> ArcPartials:
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    i, j = net.arc_from, net.arc_to
    gs, bs = net.arc_yself.real, net.arc_yself.imag
    gm, bm = net.arc_ymut.real, net.arc_ymut.imag
    vi, vj = v[..., i], v[..., j]
    d = theta[..., i] - theta[..., j]
    c, s = np.cos(d), np.sin(d)
    A = gm * c + bm * s
    B = gm * s - bm * c
    vv = vi * vj
    p = gs * vi**2 + vv * A
    q = -bs * vi**2 + vv * B

    # d/d delta, d/d vi, d/d vj
    p_d, p_vi, p_vj = -vv * B, 2 * gs * vi + vj * A, vi * A
    q_d, q_vi, q_vj = vv * A, -2 * bs * vi + vj * B, vi * B
    dp = np.stack([p_d, -p_d, p_vi, p_vj], axis=-1)
    dq = np.stack([q_d, -q_d, q_vi, q_vj], axis=-1)
    out = ArcPartials(p, q, dp, dq)
    if not second:
        return out

    zero = np.zeros_like(p)

    def hess(hdd, hdvi, hdvj, hvivi, hvivj, hvjvj):
        # ordering (theta_i, theta_j, v_i, v_j); d/dtheta_j = -d/d delta
        rows = [
            [hdd, -hdd, hdvi, hdvj],
            [-hdd, hdd, -hdvi, -hdvj],
            [hdvi, -hdvi, hvivi, hvivj],
            [hdvj, -hdvj, hvivj, hvjvj],
        ]
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    out.d2p = hess(-vv * A, -vj * B, -vi * B, 2 * gs + zero, A, zero)
    out.d2q = hess(-vv * B, vj * A, vi * A, -2 * bs + zero, B, zero)
    return out
