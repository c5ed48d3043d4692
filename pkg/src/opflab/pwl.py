"""Piecewise-linear fits of dispatch trajectories and the complexity index.

Segmentation is exact dynamic programming over breakpoints drawn from the
data abscissas. Adjacent segments share their boundary point, each segment
is scored by the SSE of its own least-squares line, and the optimum over all
placements is found in O(m^2 p) using prefix sums. The chosen breakpoints are
then used as knots of a continuous least-squares refit, which is the
function returned.
"""
from __future__ import annotations

import csv
import functools
import io
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from opflab.errors import DegenerateInput


@dataclass(frozen=True)
class PiecewiseLinear:
    """Continuous PWL function: breakpoints x_0 < ... < x_p, slopes L_1..L_p, value at x_0."""

    breakpoints: np.ndarray
    slopes: np.ndarray
    intercept: float

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        sl = np.asarray(self.slopes, dtype=float)
        if bp.ndim != 1 or len(bp) < 2:
            raise ValueError("need at least two breakpoints")
        if len(sl) != len(bp) - 1:
            raise ValueError("slopes must have one entry per piece")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "slopes", sl)
        object.__setattr__(self, "intercept", float(self.intercept))

    @property
    def p(self) -> int:
        return len(self.slopes)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def knot_values(self) -> np.ndarray:
        return self.intercept + np.concatenate([[0.0], np.cumsum(self.slopes * self.widths)])

    def __call__(self, x) -> np.ndarray:
        """Evaluate; outside [x_0, x_p] the end pieces are extended."""
        x = np.asarray(x, dtype=float)
        k = np.clip(np.searchsorted(self.breakpoints, x, side="right") - 1, 0, self.p - 1)
        return self.knot_values[k] + self.slopes[k] * (x - self.breakpoints[k])

    @classmethod
    def from_knots(cls, xk, yk) -> "PiecewiseLinear":
        xk = np.asarray(xk, dtype=float)
        yk = np.asarray(yk, dtype=float)
        return cls(xk, np.diff(yk) / np.diff(xk), yk[0])


@functools.total_ordering
@dataclass(frozen=True)
class ComplexityIndex:
    """Pair (pieces, weighted mean slope change); compared lexicographically."""

    p: int
    omega: float

    def __post_init__(self):
        if self.p < 1 or self.omega < 0:
            raise ValueError("complexity index needs p >= 1 and omega >= 0")

    def key(self) -> Tuple[int, float]:
        return (self.p, self.omega)

    def __lt__(self, other: "ComplexityIndex") -> bool:
        return self.key() < other.key()


def ci_compare(a: ComplexityIndex, b: ComplexityIndex) -> int:
    """-1, 0 or 1 as ``a`` is below, equal to or above ``b`` in (p, omega) order."""
    return (a.key() > b.key()) - (a.key() < b.key())


def complexity_index(f: PiecewiseLinear) -> ComplexityIndex:
    """omega = (1/p) * sum_i h_i |L_i - L_{i-1}| with L_0 taken equal to L_1."""
    L = f.slopes
    dL = np.abs(np.diff(L, prepend=L[0]))
    return ComplexityIndex(f.p, float(np.sum(f.widths * dL) / f.p))


# ---------------------------------------------------------------------------
# fitting


def _merge_ties(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    ux, inv, cnt = np.unique(x, return_inverse=True, return_counts=True)
    if len(ux) < 2:
        raise DegenerateInput("need at least two distinct abscissas")
    uy = np.bincount(inv, weights=y) / cnt
    return ux, uy


class _SegmentCost:
    """O(1) SSE of the least-squares line through points i..j (inclusive)."""

    def __init__(self, x, y):
        z = np.zeros(1)
        self.n = np.arange(len(x) + 1, dtype=float)
        self.sx = np.concatenate([z, np.cumsum(x)])
        self.sy = np.concatenate([z, np.cumsum(y)])
        self.sxx = np.concatenate([z, np.cumsum(x * x)])
        self.sxy = np.concatenate([z, np.cumsum(x * y)])
        self.syy = np.concatenate([z, np.cumsum(y * y)])

    def __call__(self, i, j):
        # i, j broadcastable index arrays with i < j
        a, b = i, j + 1
        n = self.n[b] - self.n[a]
        sx = self.sx[b] - self.sx[a]
        sy = self.sy[b] - self.sy[a]
        cxx = self.sxx[b] - self.sxx[a] - sx * sx / n
        cxy = self.sxy[b] - self.sxy[a] - sx * sy / n
        cyy = self.syy[b] - self.syy[a] - sy * sy / n
        with np.errstate(divide="ignore", invalid="ignore"):
            sse = cyy - np.where(cxx > 0, cxy * cxy / cxx, 0.0)
        return np.maximum(sse, 0.0)


def segment_dp(x, y, max_pieces: int) -> List[Tuple[float, np.ndarray]]:
    """Optimal shared-endpoint segmentations for every p = 1..max_pieces.

    Returns ``[(sse_p, boundary_indices_p), ...]`` where boundaries include
    0 and m-1. Among equal-cost placements the earliest breakpoints win.
    """
    m = len(x)
    P = min(max_pieces, m - 1)
    cost = _SegmentCost(x, y)
    idx = np.arange(m)
    E = np.full((P + 1, m), np.inf)
    arg = np.zeros((P + 1, m), dtype=int)
    E[1, 1:] = cost(np.zeros(m - 1, dtype=int), idx[1:])
    for p in range(2, P + 1):
        for j in range(p, m):
            i = idx[p - 1:j]
            cand = E[p - 1, i] + cost(i, np.full(len(i), j))
            k = int(np.argmin(cand))
            E[p, j], arg[p, j] = cand[k], i[k]
    out = []
    for p in range(1, P + 1):
        b = [m - 1]
        for q in range(p, 1, -1):
            b.append(arg[q, b[-1]])
        b.append(0)
        out.append((float(E[p, m - 1]), np.array(b[::-1])))
    return out


def _continuous_fit(x, y, knots_idx) -> PiecewiseLinear:
    """Least-squares continuous PWL with knots at ``x[knots_idx]`` (hinge basis)."""
    xk = x[knots_idx]
    inner = xk[1:-1]
    A = np.column_stack([np.ones_like(x), x - xk[0]] + [np.maximum(x - t, 0.0) for t in inner])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    slopes = coef[1] + np.concatenate([[0.0], np.cumsum(coef[2:])])
    return PiecewiseLinear(xk, slopes, coef[0])


def fit_pwl(x, y, max_pieces: int = 8, tol: float = 1e-2) -> PiecewiseLinear:
    """Smallest-p continuous PWL fit whose max residual is within ``tol``.

    Falls back to the ``max_pieces`` fit when no piece count reaches ``tol``.
    """
    if max_pieces < 1:
        raise ValueError("max_pieces must be at least 1")
    x, y = _merge_ties(x, y)
    best = None
    for _, bidx in segment_dp(x, y, max_pieces):
        f = _continuous_fit(x, y, bidx)
        best = f
        if np.max(np.abs(f(x) - y)) <= tol:
            return f
    return best


# ---------------------------------------------------------------------------
# bounds


def relu_capacity_bounds(p: float, k: int, s: float) -> Dict[str, float]:
    """Size needed to express ``p`` pieces at depth ``k``, and pieces reachable with size ``s``.

    min_size = k/2 * p**(1/k) - 1 ;  max_pieces = (2 s / k)**k
    """
    if p < 1 or k < 1 or s < 1:
        raise ValueError("p, k and s must all be at least 1")
    return {"min_size": 0.5 * k * p ** (1.0 / k) - 1.0, "max_pieces": (2.0 * s / k) ** k}


def pwl_approx_error_bound(f: PiecewiseLinear, p_prime: int) -> float:
    """0.5 * h_max^2 * sum_{k=1}^{p-1} |L_{k+1} - L_k| for approximating ``f`` with ``p_prime`` pieces."""
    if p_prime < 1 or p_prime > f.p:
        raise ValueError("p_prime must lie in [1, p]")
    return 0.5 * float(f.widths.max()) ** 2 * float(np.abs(np.diff(f.slopes)).sum())


# ---------------------------------------------------------------------------
# per-generator table


@dataclass
class GeneratorCI:
    gen: int
    ci: ComplexityIndex
    omega_rel: float
    pwl: PiecewiseLinear
    tol: float
    max_residual: float


@dataclass
class CITable:
    case: str
    rows: List[GeneratorCI]

    def share(self, p_max: int) -> float:
        """Percentage of generators with at most ``p_max`` pieces."""
        return 100.0 * sum(r.ci.p <= p_max for r in self.rows) / len(self.rows)

    @property
    def cumulative(self) -> Dict[str, float]:
        return {"p1": self.share(1), "p_le2": self.share(2), "p_le3": self.share(3)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cum = self.cumulative
        w.writerow(["case", "gen", "p", "omega", "omega_rel", "tol", "max_residual", "share_p1", "share_p_le2",
                    "share_p_le3"])
        for r in self.rows:
            w.writerow([self.case, r.gen, r.ci.p, repr(r.ci.omega), repr(r.omega_rel), repr(r.tol),
                        repr(r.max_residual), repr(cum["p1"]), repr(cum["p_le2"]), repr(cum["p_le3"])])
        return buf.getvalue()


def generator_ci_table(ds, tol: float = 0.01, basis: str = "capacity", max_pieces: int = 8,
                       gens: Optional[List[int]] = None) -> CITable:
    """Fit each generator's pg against total active demand (scaled to [0, 1]).

    The fit tolerance is ``tol`` times the generator's dispatch range:
    ``basis="capacity"`` uses pmax - pmin, ``basis="observed"`` the spread of
    pg across the dataset (floored at 1e-6 pu). ``omega_rel`` divides omega
    by the capacity range so units of different size compare.
    """
    if len(ds) < 2:
        raise DegenerateInput("dataset needs at least two samples")
    if basis not in ("capacity", "observed"):
        raise ValueError("basis must be 'capacity' or 'observed'")
    net = ds.net
    d = ds.total_demand()
    span = d.max() - d.min()
    if span <= 0:
        raise DegenerateInput("total demand is constant across the dataset")
    xs = (d - d.min()) / span
    pg = np.array([s.point.pg for s in ds.samples])
    rows = []
    for g in range(net.n_gen) if gens is None else gens:
        cap = max(net.pmax[g] - net.pmin[g], 1e-6)
        rng = cap if basis == "capacity" else max(np.ptp(pg[:, g]), 1e-6)
        t = tol * rng
        f = fit_pwl(xs, pg[:, g], max_pieces=max_pieces, tol=t)
        ux, uy = _merge_ties(xs, pg[:, g])
        ci = complexity_index(f)
        rows.append(GeneratorCI(g, ci, ci.omega / cap, f, t, float(np.max(np.abs(f(ux) - uy)))))
    return CITable(net.name, rows)
