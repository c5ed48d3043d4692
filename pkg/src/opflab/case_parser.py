"""Reader/writer for the version-2 MATPOWER case layout (bus, gen, branch, gencost).

Only what the OPF model needs is kept: polynomial costs of degree <= 2,
bus shunts, line charging and transformer tap/shift. Extra columns are
ignored with a warning.
"""
from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from opflab.errors import (
    DuplicateBusId,
    InvalidNetwork,
    MalformedMatrix,
    MissingSection,
    NonNumericEntry,
    NoSlackBus,
    UnsupportedFeature,
    ZeroImpedanceBranch,
)
from opflab.network import PowerNetwork

JSON_SCHEMA_VERSION = 1

# minimum column counts for each table (MATPOWER version 2)
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}
_USED_COLS = {"bus": 13, "gen": 10, "branch": 13}

_ASSIGN_RE = re.compile(r"mpc\.(\w+)\s*=\s*")
_NUMBER_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$|^[+-]?(Inf|inf|NaN|nan)$")


@dataclass
class RawCase:
    """Matrices exactly as read from a case file (MW/MVAr/degrees units)."""

    base_mva: float
    bus_rows: np.ndarray
    gen_rows: np.ndarray
    branch_rows: np.ndarray
    gencost_rows: np.ndarray
    name: str = "case"


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_number(tok: str) -> float:
    if not _NUMBER_RE.match(tok):
        raise NonNumericEntry(f"non-numeric matrix entry {tok!r}")
    return float(tok)


def _parse_matrix(body: str, name: str) -> np.ndarray:
    rows: List[List[float]] = []
    for chunk in re.split(r"[;\n]", body):
        toks = [t for t in re.split(r"[\s,]+", chunk.strip()) if t]
        if toks:
            rows.append([_parse_number(t) for t in toks])
    if not rows:
        return np.zeros((0, _MIN_COLS.get(name, 0)))
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise MalformedMatrix(f"rows of mpc.{name} have differing lengths {sorted(widths)}")
    return np.array(rows, dtype=float)


def parse_case(text: str, name: Optional[str] = None) -> RawCase:
    """Parse case text into a :class:`RawCase`."""
    clean = _strip_comments(text)
    if name is None:
        m = re.search(r"function\s+\w+\s*=\s*(\w+)", clean)
        name = m.group(1) if m else "case"

    base = None
    tables: Dict[str, np.ndarray] = {}
    pos = 0
    while True:
        m = _ASSIGN_RE.search(clean, pos)
        if not m:
            break
        key = m.group(1)
        rest = clean[m.end():]
        if rest.startswith("["):
            close = rest.find("]")
            if close < 0:
                raise MalformedMatrix(f"unterminated matrix mpc.{key}")
            tables[key] = _parse_matrix(rest[1:close], key)
            pos = m.end() + close + 1
        else:
            stmt = rest.split(";", 1)[0].split("\n", 1)[0].strip()
            if key == "baseMVA":
                base = _parse_number(stmt)
            pos = m.end() + len(stmt)

    if base is None:
        raise MissingSection("no mpc.baseMVA assignment")
    for sect in ("bus", "gen", "branch", "gencost"):
        if sect not in tables:
            raise MissingSection(f"no mpc.{sect} table")
    for sect, ncol in _MIN_COLS.items():
        mat = tables[sect]
        if mat.shape[0] and mat.shape[1] < ncol:
            raise MalformedMatrix(f"mpc.{sect} has {mat.shape[1]} columns, need at least {ncol}")
    for sect, ncol in _USED_COLS.items():
        if tables[sect].shape[1] > ncol:
            warnings.warn(f"ignoring {tables[sect].shape[1] - ncol} extra column(s) in mpc.{sect}", stacklevel=2)
    if base <= 0:
        raise InvalidNetwork("baseMVA must be positive")
    if tables["bus"].shape[0] == 0:
        raise MissingSection("mpc.bus table is empty")

    raw = RawCase(base, tables["bus"], tables["gen"], tables["branch"], tables["gencost"], name)
    ids = set(raw.bus_rows[:, 0].astype(int).tolist())
    refs = raw.gen_rows[:, 0].astype(int).tolist() + raw.branch_rows[:, :2].astype(int).ravel().tolist()
    missing = sorted(set(refs) - ids)
    if missing:
        raise InvalidNetwork(f"gen/branch rows reference unknown bus id(s) {missing}")
    return raw


def _cost_coefficients(gencost: np.ndarray, n_gen: int):
    if gencost.shape[0] < n_gen:
        raise MalformedMatrix(f"mpc.gencost has {gencost.shape[0]} rows for {n_gen} generators")
    if gencost.shape[0] > n_gen:
        warnings.warn("ignoring reactive-power cost rows in mpc.gencost", stacklevel=3)
    c = np.zeros((n_gen, 3))
    for g in range(n_gen):
        row = gencost[g]
        model, ncost = int(row[0]), int(row[3])
        if model != 2:
            raise UnsupportedFeature("only polynomial (model 2) generator costs are supported")
        if ncost > 3:
            raise UnsupportedFeature("generator cost polynomials of degree > 2 are not supported")
        coeffs = row[4:4 + ncost]
        if len(coeffs) < ncost:
            raise MalformedMatrix(f"gencost row {g} is shorter than its declared n={ncost}")
        # highest degree first in the file
        c[g, 3 - ncost:] = coeffs
    return c[:, 0], c[:, 1], c[:, 2]


def build_network(raw: RawCase) -> PowerNetwork:
    """Convert a :class:`RawCase` into a per-unit :class:`PowerNetwork`."""
    bus = raw.bus_rows
    ids = bus[:, 0].astype(int)
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise DuplicateBusId(f"duplicate bus id(s) {uniq[counts > 1].tolist()}")
    index = {int(b): k for k, b in enumerate(ids)}
    slack = np.flatnonzero(bus[:, 1].astype(int) == 3)
    if slack.size == 0:
        raise NoSlackBus("no bus has type 3 (reference)")
    if slack.size > 1:
        raise NoSlackBus(f"{slack.size} buses flagged as reference; exactly one is required")

    base = raw.base_mva
    gen = raw.gen_rows
    in_service = gen[:, 7] > 0 if gen.shape[0] else np.zeros(0, bool)
    c2, c1, c0 = _cost_coefficients(raw.gencost_rows, gen.shape[0])
    gen, c2, c1, c0 = gen[in_service], c2[in_service], c1[in_service], c0[in_service]

    br = raw.branch_rows
    br = br[br[:, 10] > 0] if br.shape[0] else br
    r, x = br[:, 2], br[:, 3]
    zero = np.flatnonzero((r == 0) & (x == 0))
    if zero.size:
        raise ZeroImpedanceBranch(f"branch row(s) {zero.tolist()} have r = x = 0")
    rate = np.where(br[:, 5] > 0, br[:, 5] / base, np.inf)
    if br.shape[1] >= 13:
        amin, amax = np.abs(br[:, 11]), np.abs(br[:, 12])
        lim = np.minimum(amin, amax)
        lim = np.where((amin == 0) | (amax == 0) | (lim >= 90), 90.0, lim)
    else:
        lim = np.full(br.shape[0], 90.0)

    return PowerNetwork(
        name=raw.name,
        base_mva=base,
        bus_ids=ids,
        slack=int(slack[0]),
        vmin=bus[:, 12],
        vmax=bus[:, 11],
        gs=bus[:, 4] / base,
        bs=bus[:, 5] / base,
        pd=bus[:, 2] / base,
        qd=bus[:, 3] / base,
        gen_bus=np.array([index[int(b)] for b in gen[:, 0]], dtype=int),
        pmin=gen[:, 9] / base,
        pmax=gen[:, 8] / base,
        qmin=gen[:, 4] / base,
        qmax=gen[:, 3] / base,
        c2=c2 * base**2,
        c1=c1 * base,
        c0=c0,
        f_bus=np.array([index[int(b)] for b in br[:, 0]], dtype=int),
        t_bus=np.array([index[int(b)] for b in br[:, 1]], dtype=int),
        r=r,
        x=x,
        b=br[:, 4],
        tap=br[:, 8],
        shift=br[:, 9],
        rate=rate,
        angle_limit=np.deg2rad(lim),
    )


# ---------------------------------------------------------------------------
# writers


def _fmt(v: float) -> str:
    v = float(v)
    if np.isinf(v):
        return "Inf" if v > 0 else "-Inf"
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def serialize_case(net: PowerNetwork) -> str:
    """Write ``net`` back out as version-2 case text (MW units)."""
    base = net.base_mva
    n = net.n_bus
    gen_buses = set(net.gen_bus.tolist())
    lines = [f"function mpc = {net.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};", "", "mpc.bus = ["]
    for k in range(n):
        btype = 3 if k == net.slack else (2 if k in gen_buses else 1)
        row = [net.bus_ids[k], btype, net.pd[k] * base, net.qd[k] * base, net.gs[k] * base, net.bs[k] * base,
               1, 1.0, 0, 0, 1, net.vmax[k], net.vmin[k]]
        lines.append("\t" + "\t".join(_fmt(x) for x in row) + ";")
    lines += ["];", "", "mpc.gen = ["]
    for g in range(net.n_gen):
        row = [net.bus_ids[net.gen_bus[g]], 0, 0, net.qmax[g] * base, net.qmin[g] * base, 1.0, base, 1,
               net.pmax[g] * base, net.pmin[g] * base]
        lines.append("\t" + "\t".join(_fmt(x) for x in row) + ";")
    lines += ["];", "", "mpc.branch = ["]
    for k in range(net.n_branch):
        rate = 0.0 if np.isinf(net.rate[k]) else net.rate[k] * base
        lim = np.rad2deg(net.angle_limit[k])
        row = [net.bus_ids[net.f_bus[k]], net.bus_ids[net.t_bus[k]], net.r[k], net.x[k], net.b[k],
               rate, rate, rate, net.tap[k], net.shift[k], 1, -lim, lim]
        lines.append("\t" + "\t".join(_fmt(x) for x in row) + ";")
    lines += ["];", "", "mpc.gencost = ["]
    for g in range(net.n_gen):
        row = [2, 0, 0, 3, net.c2[g] / base**2, net.c1[g] / base, net.c0[g]]
        lines.append("\t" + "\t".join(_fmt(x) for x in row) + ";")
    lines += ["];", ""]
    return "\n".join(lines)


def _json_list(a: np.ndarray) -> list:
    return [None if (isinstance(x, float) and np.isinf(x)) else x for x in a.tolist()]


def network_to_dict(net: PowerNetwork) -> dict:
    """Canonical per-unit JSON form.

    Schema (``schema_version`` 1): scalars ``name``, ``base_mva``, ``slack``;
    ``bus`` -> {ids, vmin, vmax, gs, bs, pd, qd}; ``gen`` -> {bus, pmin,
    pmax, qmin, qmax, c2, c1, c0}; ``branch`` -> {from, to, r, x, b, tap,
    shift, rate, angle_limit}. Bus/gen/branch references are dense indices,
    ``rate`` is null for unlimited branches, angles are in radians except
    ``shift`` (degrees, as in the case file).
    """
    return {
        "schema_version": JSON_SCHEMA_VERSION,
        "name": net.name,
        "base_mva": net.base_mva,
        "slack": net.slack,
        "bus": {
            "ids": net.bus_ids.tolist(),
            "vmin": net.vmin.tolist(),
            "vmax": net.vmax.tolist(),
            "gs": net.gs.tolist(),
            "bs": net.bs.tolist(),
            "pd": net.pd.tolist(),
            "qd": net.qd.tolist(),
        },
        "gen": {
            "bus": net.gen_bus.tolist(),
            "pmin": net.pmin.tolist(),
            "pmax": net.pmax.tolist(),
            "qmin": net.qmin.tolist(),
            "qmax": net.qmax.tolist(),
            "c2": net.c2.tolist(),
            "c1": net.c1.tolist(),
            "c0": net.c0.tolist(),
        },
        "branch": {
            "from": net.f_bus.tolist(),
            "to": net.t_bus.tolist(),
            "r": net.r.tolist(),
            "x": net.x.tolist(),
            "b": net.b.tolist(),
            "tap": net.tap.tolist(),
            "shift": net.shift.tolist(),
            "rate": _json_list(net.rate),
            "angle_limit": net.angle_limit.tolist(),
        },
    }


def network_from_dict(d: dict) -> PowerNetwork:
    if d.get("schema_version") != JSON_SCHEMA_VERSION:
        raise InvalidNetwork(f"unsupported network schema version {d.get('schema_version')!r}")
    bus, gen, br = d["bus"], d["gen"], d["branch"]
    return PowerNetwork(
        name=d["name"],
        base_mva=d["base_mva"],
        bus_ids=bus["ids"],
        slack=d["slack"],
        vmin=bus["vmin"],
        vmax=bus["vmax"],
        gs=bus["gs"],
        bs=bus["bs"],
        pd=bus["pd"],
        qd=bus["qd"],
        gen_bus=gen["bus"],
        pmin=gen["pmin"],
        pmax=gen["pmax"],
        qmin=gen["qmin"],
        qmax=gen["qmax"],
        c2=gen["c2"],
        c1=gen["c1"],
        c0=gen["c0"],
        f_bus=br["from"],
        t_bus=br["to"],
        r=br["r"],
        x=br["x"],
        b=br["b"],
        tap=br["tap"],
        shift=br["shift"],
        rate=[np.inf if v is None else v for v in br["rate"]],
        angle_limit=br["angle_limit"],
    )


def network_to_json(net: PowerNetwork) -> str:
    return json.dumps(network_to_dict(net), sort_keys=True)


def network_from_json(text: str) -> PowerNetwork:
    return network_from_dict(json.loads(text))


def load_case(path: Union[str, Path]) -> PowerNetwork:
    """Read a ``.m`` case file or a canonical ``.json`` network."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return network_from_json(text)
    return build_network(parse_case(text, name=path.stem))


def builtin_case(name: str = "case30") -> PowerNetwork:
    """Load a case shipped with the package (``case30``)."""
    text = resources.files("opflab.cases").joinpath(f"{name}.m").read_text(encoding="utf-8")
    return build_network(parse_case(text, name=name))
