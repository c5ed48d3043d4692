"""Training-data generation: perturbed loads, solved set-points, solver trajectories.

Dataset files are JSON lines. The first line is a header::

    {"schema_version": 1, "kind": "opflab-dataset", "network": {...},
     "seed": int, "options": {...}, "split": {"train": [...], "test": [...]} | null}

followed by one sample per line::

    {"alpha": float, "pd": [...], "qd": [...], "point": {"v", "theta", "pg", "qg"},
     "trajectory": [point, ...], "objective": float, "iterations": int}

Keys are sorted and floats written with ``repr`` so files round-trip exactly.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from opflab.case_parser import network_from_dict, network_to_dict
from opflab.errors import NegativeLoadFactor, TooManyFailures
from opflab.network import LoadVector, OperatingPoint, PowerNetwork
from opflab.solver import SolverOptions, solve_acopf, trajectory_indices

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_RESAMPLE = 100


# ---------------------------------------------------------------------------
# load perturbation


def perturb_loads(base: LoadVector, alpha: float, sigma: Optional[float] = None,
                  seed: Union[int, np.random.Generator, None] = None) -> LoadVector:
    """Scale each nonzero load by an independent factor ~ N(alpha, sigma).

    Active and reactive demand at a bus share the factor. Afterwards the
    active and the reactive totals are each rescaled by one common factor so
    that ``sum(pd') = alpha * sum(pd)`` and ``sum(qd') = alpha * sum(qd)``.
    ``sigma`` defaults to ``0.05 * alpha``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    sigma = 0.05 * alpha if sigma is None else float(sigma)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    active = (base.pd != 0) | (base.qd != 0)
    k = int(active.sum())
    for _ in range(MAX_RESAMPLE):
        f = rng.normal(alpha, sigma, size=k) if sigma > 0 else np.full(k, float(alpha))
        if np.all(f > 0):
            break
    else:
        raise NegativeLoadFactor(f"load factor <= 0 in {MAX_RESAMPLE} consecutive draws (alpha={alpha}, sigma={sigma})")

    fac = np.zeros(len(base.pd))
    fac[active] = f
    pd = base.pd * fac
    qd = base.qd * fac
    pd = _rescale(pd, alpha * base.pd.sum())
    qd = _rescale(qd, alpha * base.qd.sum())
    return LoadVector(pd, qd)


def _rescale(x: np.ndarray, target: float) -> np.ndarray:
    s = x.sum()
    if s == 0.0:
        return x
    out = x * (target / s)
    # put the last rounding error on the largest entry so the sum is exact to ~1 ulp
    k = int(np.argmax(np.abs(out)))
    out[k] += target - out.sum()
    return out


# ---------------------------------------------------------------------------
# samples


@dataclass
class OpfSample:
    alpha: float
    loads: LoadVector
    point: OperatingPoint
    trajectory: List[OperatingPoint]
    objective: float
    iterations: int = 0

    def setpoints(self, net: PowerNetwork) -> np.ndarray:
        return self.point.setpoints(net)

    def to_dict(self) -> dict:
        return {
            "alpha": float(self.alpha),
            "pd": self.loads.pd.tolist(),
            "qd": self.loads.qd.tolist(),
            "point": self.point.to_dict(),
            "trajectory": [p.to_dict() for p in self.trajectory],
            "objective": float(self.objective),
            "iterations": int(self.iterations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OpfSample":
        return cls(
            alpha=d["alpha"],
            loads=LoadVector(np.array(d["pd"], dtype=float), np.array(d["qd"], dtype=float)),
            point=OperatingPoint.from_dict(d["point"]),
            trajectory=[OperatingPoint.from_dict(p) for p in d["trajectory"]],
            objective=d["objective"],
            iterations=d.get("iterations", 0),
        )


def full_state(net: PowerNetwork, op: OperatingPoint) -> np.ndarray:
    """Full-state vector ``[pg, qg, v, theta]`` used by the constrained heads."""
    return np.concatenate([op.pg, op.qg, op.v, op.theta])


@dataclass
class OpfDataset:
    net: PowerNetwork
    samples: List[OpfSample]
    seed: Optional[int] = None
    options: Dict = field(default_factory=dict)
    train: Optional[np.ndarray] = None
    test: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.samples)

    @property
    def has_split(self) -> bool:
        return self.train is not None and self.test is not None

    @property
    def T(self) -> int:
        return len(self.samples[0].trajectory) if self.samples else 0

    def _idx(self, idx) -> np.ndarray:
        return np.arange(len(self.samples)) if idx is None else np.asarray(idx, dtype=int)

    def features(self, idx=None) -> np.ndarray:
        return np.array([self.samples[k].loads.features() for k in self._idx(idx)])

    def setpoints(self, idx=None) -> np.ndarray:
        return np.array([self.samples[k].setpoints(self.net) for k in self._idx(idx)])

    def full_states(self, idx=None) -> np.ndarray:
        return np.array([full_state(self.net, self.samples[k].point) for k in self._idx(idx)])

    def trajectories(self, idx=None, full: bool = True) -> np.ndarray:
        """Stacked trajectory snapshots, shape ``(N, T, D)``."""
        conv = (lambda p: full_state(self.net, p)) if full else (lambda p: p.setpoints(self.net))
        return np.array([[conv(p) for p in self.samples[k].trajectory] for k in self._idx(idx)])

    def total_demand(self, idx=None) -> np.ndarray:
        return np.array([self.samples[k].loads.pd.sum() for k in self._idx(idx)])

    def alphas(self, idx=None) -> np.ndarray:
        return np.array([self.samples[k].alpha for k in self._idx(idx)])

    def subset(self, idx) -> "OpfDataset":
        idx = self._idx(idx)
        return OpfDataset(self.net, [self.samples[k] for k in idx], self.seed, dict(self.options))

    # -- persistence ---------------------------------------------------------

    def header(self) -> dict:
        split = None
        if self.has_split:
            split = {"train": [int(k) for k in self.train], "test": [int(k) for k in self.test]}
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "opflab-dataset",
            "network": network_to_dict(self.net),
            "seed": self.seed,
            "options": self.options,
            "split": split,
        }

    def dumps(self) -> str:
        lines = [_dump(self.header())] + [_dump(s.to_dict()) for s in self.samples]
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "OpfDataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty dataset file")
        head = json.loads(lines[0])
        if head.get("kind") != "opflab-dataset":
            raise ValueError("not a dataset file (missing header)")
        if head.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema version {head.get('schema_version')}")
        ds = cls(
            network_from_dict(head["network"]),
            [OpfSample.from_dict(json.loads(ln)) for ln in lines[1:]],
            head.get("seed"),
            head.get("options", {}),
        )
        if head.get("split"):
            ds.train = np.array(head["split"]["train"], dtype=int)
            ds.test = np.array(head["split"]["test"], dtype=int)
        return ds

    @classmethod
    def load(cls, path: Union[str, Path]) -> "OpfDataset":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------------------
# generation


def _draw(net: PowerNetwork, k: int, seed: int, alpha_range, sigma, T: int, opts: SolverOptions
          ) -> Tuple[int, Optional[OpfSample]]:
    """Draw and solve instance ``k``; its randomness depends only on ``(seed, k)``."""
    rng = np.random.default_rng([seed, k])
    alpha = float(rng.uniform(*alpha_range))
    sig = None if sigma is None else sigma * alpha
    loads = perturb_loads(net.nominal_loads, alpha, sig, rng)
    res = solve_acopf(net, loads, opts)
    if not res.converged:
        return k, None
    traj = [res.trajectory[i] for i in trajectory_indices(len(res.trajectory), T)]
    # the last snapshot is the returned point by construction
    return k, OpfSample(alpha, loads, res.point, traj, res.objective, res.iterations)


def generate_dataset(net: PowerNetwork, N: int, alpha_range: Tuple[float, float] = (0.8, 1.2),
                     sigma: Optional[float] = 0.05, seed: int = 0, T: int = 5,
                     opts: Optional[SolverOptions] = None, workers: int = 1) -> OpfDataset:
    """Solve ``N`` perturbed-load instances; failures are redrawn.

    ``sigma`` is relative: the per-bus factor has standard deviation
    ``sigma * alpha``. Draw ``k`` is seeded by ``(seed, k)`` alone, so the
    result does not depend on ``workers``. Samples are ordered by total
    active demand.
    """
    if N < 5:
        raise ValueError("N must be at least 5")
    if T < 1:
        raise ValueError("T must be at least 1")
    lo, hi = alpha_range
    if not 0 < lo <= hi:
        raise ValueError("alpha_range must satisfy 0 < lo <= hi")
    opts = opts or SolverOptions()

    found: List[Tuple[int, OpfSample]] = []
    failed: List[int] = []
    k = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(found) < N:
            batch = range(k, k + max(N - len(found), workers))
            k = batch.stop
            args = [(net, i, seed, alpha_range, sigma, T, opts) for i in batch]
            results = pool.map(_draw, *zip(*args)) if pool else (_draw(*a) for a in args)
            for i, sample in results:
                if len(found) >= N:
                    break
                if sample is None:
                    failed.append(i)
                    log.info("draw %d did not converge; redrawing", i)
                    if len(failed) > N:
                        raise TooManyFailures(f"{len(failed)} of {i + 1} solves failed (more than half)")
                else:
                    found.append((i, sample))
    finally:
        if pool:
            pool.shutdown()

    order = sorted(range(N), key=lambda m: (found[m][1].loads.pd.sum(), found[m][1].alpha, found[m][0]))
    samples = [found[m][1] for m in order]
    options = {
        "N": N,
        "alpha_range": [float(lo), float(hi)],
        "sigma": sigma,
        "T": T,
        "draws": found[-1][0] + 1,
        "failures": len(failed),
        "solver": {"tol_feas": opts.tol_feas, "tol_opt": opts.tol_opt, "max_iter": opts.max_iter},
    }
    return OpfDataset(net, samples, seed, options)


def split_dataset(ds: OpfDataset, ratio: float = 0.8, seed: int = 0) -> OpfDataset:
    """Uniform random train/test partition with ``round(ratio * N)`` training samples."""
    N = len(ds)
    if N < 5:
        raise ValueError("split needs at least 5 samples")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(N)
    n_train = int(np.floor(ratio * N + 0.5))
    out = OpfDataset(ds.net, ds.samples, ds.seed, dict(ds.options))
    out.train = np.sort(perm[:n_train])
    out.test = np.sort(perm[n_train:])
    out.options["split_seed"] = seed
    out.options["split_ratio"] = ratio
    return out

