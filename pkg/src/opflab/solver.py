"""Primal-dual interior-point solver for AC-OPF and the load-flow projection.

Decision vector layout: ``x = [theta (n), v (n), pg (G), qg (G)]``.

Equalities are the real/imaginary power balance at each bus plus the slack
angle; inequalities are variable bounds, branch angle differences (only for
branches tighter than pi/2) and squared apparent-power limits on both arcs of
each rated branch. Slacks turn every inequality into ``h(x) + z = 0`` with
``z > 0``; the barrier parameter is decreased monotonically (divided by ten)
whenever the barrier subproblem is solved to within ``kappa_eps * mu``.
Newton steps use a dense reduced KKT system with inertia correction and the
fraction-to-boundary rule.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from opflab.errors import SingularKKT
from opflab.network import LoadVector, OperatingPoint, PowerNetwork, arc_partials, dispatch_cost

log = logging.getLogger(__name__)


class SolveStatus(str, enum.Enum):
    CONVERGED = "Converged"
    ITER_LIMIT = "IterLimit"
    INFEASIBLE = "Infeasible"


@dataclass
class SolverOptions:
    tol_feas: float = 1e-6
    tol_opt: float = 1e-6
    max_iter: int = 300
    mu_init: float = 0.1
    mu_factor: float = 0.1
    kappa_eps: float = 10.0
    tau_min: float = 0.99
    bound_relax: float = 1e-8
    record_trajectory: bool = True

    def __post_init__(self):
        if self.tol_feas <= 0 or self.tol_opt <= 0:
            raise ValueError("solver tolerances must be positive")
        if not 0 < self.mu_factor < 1:
            raise ValueError("mu_factor must lie in (0, 1)")


@dataclass
class SolveResult:
    point: OperatingPoint
    objective: float
    status: SolveStatus
    iterations: int
    trajectory: List[OperatingPoint] = field(default_factory=list)
    feasibility: float = np.inf
    stationarity: float = np.inf
    distance: Optional[float] = None

    @property
    def converged(self) -> bool:
        return self.status == SolveStatus.CONVERGED

    def to_dict(self) -> dict:
        return {
            "point": self.point.to_dict(),
            "objective": float(self.objective),
            "status": self.status.value,
            "iterations": int(self.iterations),
            "feasibility": float(self.feasibility),
            "stationarity": float(self.stationarity),
            "distance": None if self.distance is None else float(self.distance),
            "trajectory": [p.to_dict() for p in self.trajectory],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolveResult":
        return cls(
            point=OperatingPoint.from_dict(d["point"]),
            objective=d["objective"],
            status=SolveStatus(d["status"]),
            iterations=d["iterations"],
            trajectory=[OperatingPoint.from_dict(p) for p in d["trajectory"]],
            feasibility=d["feasibility"],
            stationarity=d["stationarity"],
            distance=d["distance"],
        )


# objective callback: x -> (f, grad, hess)
Objective = Callable[[np.ndarray], Tuple[float, np.ndarray, np.ndarray]]


class _Layout:
    def __init__(self, net: PowerNetwork):
        n, g = net.n_bus, net.n_gen
        self.n, self.g = n, g
        self.th = slice(0, n)
        self.v = slice(n, 2 * n)
        self.pg = slice(2 * n, 2 * n + g)
        self.qg = slice(2 * n + g, 2 * n + 2 * g)
        self.nx = 2 * n + 2 * g

    def split(self, x):
        return x[self.th], x[self.v], x[self.pg], x[self.qg]

    def point(self, x) -> OperatingPoint:
        th, v, pg, qg = self.split(x)
        return OperatingPoint(v.copy(), th.copy(), pg.copy(), qg.copy())


class _Constraints:
    """Equality and inequality constraint evaluation for one network/load pair."""

    def __init__(self, net: PowerNetwork, loads: LoadVector, opts: SolverOptions):
        self.net, self.loads = net, loads
        lay = self.lay = _Layout(net)
        n, g, nx = lay.n, lay.g, lay.nx
        self.arc_i, self.arc_j = net.arc_from, net.arc_to
        # columns of (theta_i, theta_j, v_i, v_j) for each arc
        self.arc_cols = np.stack([self.arc_i, self.arc_j, n + self.arc_i, n + self.arc_j], axis=1)

        # linear bound rows: A x <= ub
        def relax(b, up):
            return b + (1 if up else -1) * opts.bound_relax * np.maximum(1.0, np.abs(b))

        rows, rhs = [], []
        eye = np.eye(nx)
        for sl, lo, hi in ((lay.v, net.vmin, net.vmax), (lay.pg, net.pmin, net.pmax), (lay.qg, net.qmin, net.qmax)):
            E = eye[sl]
            rows += [E, -E]
            rhs += [relax(hi, True), -relax(lo, False)]
        lim = net.angle_limit < np.pi / 2 - 1e-9
        self.n_angle = int(lim.sum())
        if self.n_angle:
            D = np.zeros((self.n_angle, nx))
            ks = np.flatnonzero(lim)
            D[np.arange(self.n_angle), net.f_bus[ks]] = 1.0
            D[np.arange(self.n_angle), net.t_bus[ks]] = -1.0
            rows += [D, -D]
            rhs += [net.angle_limit[ks], net.angle_limit[ks]]
        self.A = np.vstack(rows)
        self.b = np.concatenate(rhs)
        self.n_lin = len(self.b)

        rate = net.arc_rate
        self.rated = np.flatnonzero(np.isfinite(rate))
        self.rate2 = rate[self.rated] ** 2
        self.n_ineq = self.n_lin + len(self.rated)
        self.n_eq = 2 * n + 1

        # constant parts of the balance Jacobian
        Jc = np.zeros((self.n_eq, nx))
        Jc[net.gen_bus, 2 * n + np.arange(g)] = 1.0
        Jc[n + net.gen_bus, 2 * n + g + np.arange(g)] = 1.0
        Jc[2 * n, net.slack] = 1.0
        self.Jg_const = Jc

    def evaluate(self, x, second: bool):
        net, lay = self.net, self.lay
        n = lay.n
        th, v, pg, qg = lay.split(x)
        ap = arc_partials(net, v, th, second=second)

        # equalities
        gen_p = np.bincount(net.gen_bus, weights=pg, minlength=n)
        gen_q = np.bincount(net.gen_bus, weights=qg, minlength=n)
        out_p = np.bincount(self.arc_i, weights=ap.p, minlength=n)
        out_q = np.bincount(self.arc_i, weights=ap.q, minlength=n)
        geq = np.concatenate([
            gen_p - self.loads.pd - net.gs * v**2 - out_p,
            gen_q - self.loads.qd + net.bs * v**2 - out_q,
            [th[net.slack]],
        ])
        Jg = self.Jg_const.copy()
        Jg[np.arange(n), n + np.arange(n)] += -2 * net.gs * v
        Jg[n + np.arange(n), n + np.arange(n)] += 2 * net.bs * v
        for c in range(4):
            np.add.at(Jg, (self.arc_i, self.arc_cols[:, c]), -ap.dp[:, c])
            np.add.at(Jg, (n + self.arc_i, self.arc_cols[:, c]), -ap.dq[:, c])

        # inequalities
        r = self.rated
        hp, hq = ap.p[r], ap.q[r]
        h = np.concatenate([self.A @ x - self.b, hp**2 + hq**2 - self.rate2])
        Jh_th = np.zeros((len(r), lay.nx))
        gp = 2 * (hp[:, None] * ap.dp[r] + hq[:, None] * ap.dq[r])
        for c in range(4):
            np.add.at(Jh_th, (np.arange(len(r)), self.arc_cols[r, c]), gp[:, c])
        Jh = np.vstack([self.A, Jh_th])
        return geq, Jg, h, Jh, ap

    def hessian(self, ap, lam, nu):
        """Hessian of lam' g + nu' h with respect to x."""
        net, lay = self.net, self.lay
        n = lay.n
        H = np.zeros((lay.nx, lay.nx))
        lp, lq = lam[:n], lam[n:2 * n]
        vidx = n + np.arange(n)
        # shunt terms
        H[vidx, vidx] += -2 * net.gs * lp + 2 * net.bs * lq
        # balance: each arc enters its sending bus with a minus sign
        w = -(lp[self.arc_i][:, None, None] * ap.d2p + lq[self.arc_i][:, None, None] * ap.d2q)
        # thermal: grad (P^2 + Q^2) outer products plus curvature
        r = self.rated
        if len(r):
            nut = nu[self.n_lin:]
            P, Q = ap.p[r], ap.q[r]
            dP, dQ = ap.dp[r], ap.dq[r]
            ht = 2 * (dP[:, :, None] * dP[:, None, :] + dQ[:, :, None] * dQ[:, None, :]
                      + P[:, None, None] * ap.d2p[r] + Q[:, None, None] * ap.d2q[r])
            w[r] += nut[:, None, None] * ht
        cols = self.arc_cols
        for a in range(4):
            for b in range(4):
                np.add.at(H, (cols[:, a], cols[:, b]), w[:, a, b])
        return H


def _opf_objective(net: PowerNetwork, lay: _Layout) -> Objective:
    H = np.zeros((lay.nx, lay.nx))
    H[lay.pg, lay.pg] = np.diag(2 * net.c2)

    def f(x):
        pg = x[lay.pg]
        grad = np.zeros(lay.nx)
        grad[lay.pg] = 2 * net.c2 * pg + net.c1
        return float(np.sum(net.c2 * pg**2 + net.c1 * pg + net.c0)), grad, H

    return f


def _distance_objective(net: PowerNetwork, lay: _Layout, target: np.ndarray) -> Objective:
    g = net.n_gen
    p_hat, v_hat = target[:g], target[g:]
    vcols = lay.n + net.gen_bus
    H = np.zeros((lay.nx, lay.nx))
    H[lay.pg, lay.pg] = 2 * np.eye(g)
    np.add.at(H, (vcols, vcols), 2.0)

    def f(x):
        dp = x[lay.pg] - p_hat
        dv = x[vcols] - v_hat
        grad = np.zeros(lay.nx)
        grad[lay.pg] = 2 * dp
        np.add.at(grad, vcols, 2 * dv)
        return float(dp @ dp + dv @ dv), grad, H

    return f


def flat_start(net: PowerNetwork) -> np.ndarray:
    lay = _Layout(net)
    x = np.zeros(lay.nx)
    x[lay.v] = 0.5 * (net.vmin + net.vmax)
    x[lay.pg] = 0.5 * (net.pmin + net.pmax)
    x[lay.qg] = 0.5 * (net.qmin + net.qmax)
    return x


def _inertia_solve(M, Jg, rhs_x, rhs_g, delta_prev):
    """Solve the reduced KKT system, regularising until the inertia is (nx, neq, 0).

    The matrix is symmetrically equilibrated first; congruence preserves the
    inertia and keeps the eigenvalue signs resolvable when barrier terms
    near active bounds dominate the scale.
    """
    nx, ne = M.shape[0], Jg.shape[0]
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(Jg))):
        raise SingularKKT("non-finite entries in KKT matrix")
    K = np.zeros((nx + ne, nx + ne))
    K[:nx, nx:] = Jg.T
    K[nx:, :nx] = Jg
    rhs = np.concatenate([rhs_x, rhs_g])
    delta_w, delta_c = 0.0, 0.0
    for attempt in range(60):
        K[:nx, :nx] = M + delta_w * np.eye(nx)
        K[nx:, nx:] = -delta_c * np.eye(ne)
        sc = 1.0 / np.sqrt(np.maximum(np.abs(K).max(axis=1), 1e-300))
        Ks = sc[:, None] * K * sc[None, :]
        ev = np.linalg.eigvalsh(Ks)
        n_pos = int(np.sum(ev > 1e-13))
        n_neg = int(np.sum(ev < -1e-13))
        if n_pos == nx and n_neg == ne:
            lu = lu_factor(Ks)

            def solve(rx, rg):
                sol = sc * lu_solve(lu, sc * np.concatenate([rx, rg]))
                return sol[:nx], sol[nx:]

            dx, dlam = solve(rhs_x, rhs_g)
            return dx, dlam, delta_w, solve
        if n_pos + n_neg < nx + ne and delta_c == 0.0:
            delta_c = 1e-8
        if n_pos != nx:
            if delta_w == 0.0:
                delta_w = 1e-4 if delta_prev == 0.0 else max(1e-20, delta_prev / 3)
            else:
                delta_w *= 8.0 if delta_prev else 100.0
        if delta_w > 1e40:
            break
    raise SingularKKT("could not regularise KKT matrix to the correct inertia")


def _infeasibility(geq, h) -> float:
    return max(np.abs(geq).max(), max(h.max(), 0.0))


def _second_order_correction(cons, kkt_solve, Jh, x, z, geq, h, feas_prev, tau, rounds: int = 3):
    """Pull a trial point back towards the power-flow manifold.

    A long Newton step leaves a residual quadratic in the step length.
    Re-solving the current KKT system against that residual gives a
    correction that keeps the barrier-weighted metric; it is kept only while
    it lowers infeasibility. Returns the point and whether infeasibility is
    within ``feas_prev``.
    """
    theta = _infeasibility(geq, h)
    for _ in range(rounds):
        if theta <= feas_prev:
            break
        dxc, _ = kkt_solve(np.zeros_like(x), -geq)
        # slacks follow the linearised inequalities, as in the main step
        dzc = -(Jh @ dxc)
        if np.any(z + dzc < (1.0 - tau) * z):
            break
        geq_c, _, h_c, _, _ = cons.evaluate(x + dxc, second=False)
        theta_c = _infeasibility(geq_c, h_c)
        if theta_c >= theta:
            break
        x, z, geq, h, theta = x + dxc, z + dzc, geq_c, h_c, theta_c
    return x, z, theta <= feas_prev


def _accept_step(cons, kkt_solve, Jh, x, z, dx, dz, alpha, feas_prev, tau, halvings: int = 6):
    """Primal step that does not raise infeasibility when that can be avoided.

    Tries the full step with second-order corrections, then shorter steps;
    if none keeps infeasibility in check the full step is taken anyway.
    """
    a = alpha
    for _ in range(halvings + 1):
        xt, zt = x + a * dx, z + a * dz
        geq_t, _, h_t, _, _ = cons.evaluate(xt, second=False)
        xt, zt, ok = _second_order_correction(cons, kkt_solve, Jh, xt, zt, geq_t, h_t, feas_prev, tau)
        if ok:
            return xt, zt
        a *= 0.5
    return x + alpha * dx, z + alpha * dz


def _ipm(net: PowerNetwork, loads: LoadVector, objective: Objective, opts: SolverOptions,
         x0: Optional[np.ndarray] = None):
    cons = _Constraints(net, loads, opts)
    lay = cons.lay
    x = flat_start(net) if x0 is None else np.array(x0, dtype=float)

    f0, gf0, _ = objective(x)
    obj_scale = min(1.0, 100.0 / max(np.abs(gf0).max(), 1e-12))

    geq, Jg, h, Jh, ap = cons.evaluate(x, second=True)
    mu = opts.mu_init
    z = np.maximum(-h, 1e-2 * np.maximum(1.0, np.abs(h)))
    z = np.maximum(z, 1e-10)
    nu = mu / z
    lam = np.zeros(cons.n_eq)
    mu_min = opts.tol_opt / 10.0

    trajectory: List[OperatingPoint] = []
    delta_prev = 0.0
    best = None
    stalled = 0
    status = SolveStatus.ITER_LIMIT
    it = 0
    feas = dual = np.inf

    while True:
        f, gf, Hf = objective(x)
        Lx = obj_scale * gf + Jg.T @ lam + Jh.T @ nu
        s_d = max(100.0, (np.abs(lam).sum() + np.abs(nu).sum()) / max(1, cons.n_eq + cons.n_ineq)) / 100.0
        feas = max(np.abs(geq).max(), max(h.max(), 0.0))
        dual = np.abs(Lx).max() / s_d
        comp = np.abs(z * nu).max() / s_d
        err0 = max(feas / opts.tol_feas, dual / opts.tol_opt, comp / opts.tol_opt)
        if best is None or err0 < best[0]:
            best = (err0, x.copy(), feas, dual)
        if feas <= opts.tol_feas and dual <= opts.tol_opt and comp <= opts.tol_opt:
            status = SolveStatus.CONVERGED
            break
        if it >= opts.max_iter:
            status = SolveStatus.ITER_LIMIT
            break

        # monotone barrier decrease
        while mu > mu_min:
            err_mu = max(dual, np.abs(geq).max(), np.abs(h + z).max(), np.abs(z * nu - mu).max() / s_d)
            if err_mu > opts.kappa_eps * mu:
                break
            mu = max(mu_min, opts.mu_factor * mu)

        Lxx = obj_scale * Hf + cons.hessian(ap, lam, nu)
        zinv = 1.0 / z
        M = Lxx + Jh.T @ ((nu * zinv)[:, None] * Jh)
        N = Lx + Jh.T @ (zinv * (nu * h + mu))
        dx, dlam, delta_prev, kkt_solve = _inertia_solve(M, Jg, -N, -geq, delta_prev)
        dz = -h - z - Jh @ dx
        dnu = -nu + zinv * (mu - nu * dz)

        tau = max(opts.tau_min, 1.0 - mu)
        neg = dz < 0
        alpha_p = min(1.0, tau * np.min(-z[neg] / dz[neg])) if neg.any() else 1.0
        neg = dnu < 0
        alpha_d = min(1.0, tau * np.min(-nu[neg] / dnu[neg])) if neg.any() else 1.0

        # infeasibility below a tenth of tol_feas counts as settled
        x, z = _accept_step(cons, kkt_solve, Jh, x, z, dx, dz, alpha_p, max(feas, 0.1 * opts.tol_feas), tau)
        lam = lam + alpha_d * dlam
        nu = nu + alpha_d * dnu
        it += 1
        if opts.record_trajectory:
            trajectory.append(lay.point(x))

        geq, Jg, h, Jh, ap = cons.evaluate(x, second=True)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(geq))):
            status = SolveStatus.INFEASIBLE
            break
        stalled = stalled + 1 if alpha_p < 1e-8 else 0
        if stalled >= 10:
            status = SolveStatus.INFEASIBLE
            break

    if status != SolveStatus.CONVERGED and best is not None:
        _, xb, feas, dual = best
        x = xb
        if opts.record_trajectory and (not trajectory or not np.array_equal(trajectory[-1].v, x[lay.v])
                                       or not np.array_equal(trajectory[-1].theta, x[lay.th])):
            trajectory.append(lay.point(x))
    if not trajectory:
        trajectory.append(lay.point(x))
    log.debug("ipm finished: %s after %d iterations (feas %.2e, dual %.2e)", status.value, it, feas, dual)
    return x, status, it, trajectory, feas, dual


def solve_acopf(net: PowerNetwork, loads: Optional[LoadVector] = None,
                opts: Optional[SolverOptions] = None) -> SolveResult:
    """Solve the AC-OPF for ``loads`` (nominal demand when omitted) from a flat start."""
    if net.n_gen < 1:
        raise ValueError("network has no generators")
    loads = net.nominal_loads if loads is None else loads
    if loads.pd.shape != (net.n_bus,):
        raise ValueError("load vector length does not match bus count")
    opts = opts or SolverOptions()
    lay = _Layout(net)
    x, status, it, traj, feas, dual = _ipm(net, loads, _opf_objective(net, lay), opts)
    point = lay.point(x)
    return SolveResult(point, float(dispatch_cost(net, point.pg)), status, it, traj, feas, dual)


def project_load_flow(net: PowerNetwork, loads: LoadVector, yhat,
                      opts: Optional[SolverOptions] = None) -> SolveResult:
    """Nearest feasible point to the set-points ``yhat = (pg, v at generator buses)``.

    Distance is squared Euclidean over the set-point coordinates only.
    ``result.distance`` holds the achieved squared distance.
    """
    yhat = np.asarray(yhat, dtype=float)
    if yhat.shape != (2 * net.n_gen,):
        raise ValueError(f"set-point vector must have length {2 * net.n_gen}, got {yhat.shape}")
    opts = opts or SolverOptions()
    # multipliers of a squared distance scale with the offset, so complementarity
    # z * nu ~ offset^2: locating the point to tol_feas needs tol_feas^2
    opts = replace(opts, tol_opt=min(opts.tol_opt, opts.tol_feas ** 2))
    lay = _Layout(net)
    obj = _distance_objective(net, lay, yhat)
    x, status, it, traj, feas, dual = _ipm(net, loads, obj, opts)
    point = lay.point(x)
    dist, _, _ = obj(x)
    return SolveResult(point, float(dispatch_cost(net, point.pg)), status, it, traj, feas, dual, distance=dist)


def sample_trajectory(result: SolveResult, T: int, net: PowerNetwork) -> List[np.ndarray]:
    """``T`` set-point snapshots at evenly spaced iterate indices, ending at the final point.

    Snapshot ``k`` (0-based) is iterate ``floor((k + 1) * (L - 1) / T)`` of a
    trajectory of length ``L``; short trajectories repeat early iterates.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    traj = result.trajectory
    if not traj:
        raise ValueError("result carries no trajectory")
    return [traj[i].setpoints(net) for i in trajectory_indices(len(traj), T)]


def trajectory_indices(length: int, T: int) -> List[int]:
    return [((k + 1) * (length - 1)) // T for k in range(T)]
