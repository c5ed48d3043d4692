"""Command-line front end: ``opflab solve|gen|ci|train|eval|report``.

Every command takes ``--config FILE.toml``. Top-level keys of the file apply
to all commands and a ``[command]`` table overrides them; flags given on the
command line override both. Exit codes: 0 success, 1 internal error,
2 input or usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from opflab import __version__
from opflab.case_parser import builtin_case, load_case
from opflab.dataset import OpfDataset, generate_dataset, split_dataset
from opflab.errors import (AngleGuardError, CaseError, DegenerateInput, NegativeLoadFactor, NonFiniteLoss,
                           ShapeMismatch, SolverError, TooManyFailures)
from opflab.evaluation import (Predictor, TruthEcho, binding_constraint_scan, ci_error_correlation,
                               evaluate_model, model_size_sweep, param_table)
from opflab.network import FAMILIES, LoadVector, PowerNetwork, constraint_violations
from opflab.neural.checkpoint import load_checkpoint, save_checkpoint
from opflab.pwl import generator_ci_table
from opflab.solver import SolverOptions, solve_acopf
from opflab.svgplot import write_chart
from opflab.synthetic import SYNTHETIC
from opflab.training import KINDS, TrainConfig, train

log = logging.getLogger("opflab")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


DEFAULTS: Dict[str, dict] = {
    "solve": {"case": None, "alpha": 1.0, "loads": None, "out": "solve.json", "seed": 0},
    "gen": {"case": None, "n": 1000, "alpha_min": 0.8, "alpha_max": 1.2, "sigma": 0.05, "T": 5, "seed": 0,
            "split_ratio": 0.8, "workers": 1, "out": "dataset.jsonl"},
    "ci": {"dataset": None, "tol": 0.01, "basis": "capacity", "max_pieces": 8, "out": "ci.csv", "seed": 0},
    "train": {"dataset": None, "kind": "fcc", "epochs": 300, "batch_size": 32, "lr": 1e-3, "seed": 0,
              "lambda_init": None, "rho": 0.01, "dual_period": 5, "patience": 20, "T": None,
              "activation": "relu", "width_factor": 4, "hidden": 8, "embed": 8, "teacher_forcing": False,
              "out": None},
    "eval": {"checkpoint": None, "dataset": None, "out": None, "workers": 1, "svg": False, "project": True,
             "seed": 0},
    "report": {"run_dir": None, "out": None, "seed": 0, "widths": "1,2,4", "tol": 0.01, "tol_bind": 1e-4,
               "epochs": 300},
}


# ---------------------------------------------------------------------------
# helpers


def resolve_case(spec: str) -> PowerNetwork:
    """A case file path, a synthetic case name or a shipped case name."""
    if spec is None:
        raise UsageError("a case is required (--case)")
    path = Path(spec)
    if path.exists():
        return load_case(path)
    if spec in SYNTHETIC:
        return SYNTHETIC[spec]()
    try:
        return builtin_case(spec)
    except FileNotFoundError:
        raise UsageError(f"no case file or known case named {spec!r}") from None


def load_dataset(path) -> OpfDataset:
    if path is None:
        raise UsageError("a dataset file is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset {p} not found")
    ds = OpfDataset.load(p)
    if len(ds) == 0:
        raise UsageError(f"dataset {p} holds no samples")
    return ds


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n", encoding="utf-8")
    return path


def write_csv(path: Path, header: List[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def merge_config(cmd: str, args: argparse.Namespace) -> dict:
    """Defaults < config file (top level, then [cmd] table) < command-line flags."""
    out = dict(DEFAULTS[cmd])
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"config file {p} not found")
        data = tomllib.loads(p.read_text(encoding="utf-8"))
        top = {k: v for k, v in data.items() if not isinstance(v, dict)}
        for src in (top, data.get(cmd, {})):
            for k, v in src.items():
                if k in out:
                    out[k] = v
                elif src is not top:
                    raise UsageError(f"unknown key {k!r} in [{cmd}] of {p}")
    for k in out:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_solve(c: dict) -> int:
    net = resolve_case(c["case"])
    if c["loads"]:
        d = json.loads(Path(c["loads"]).read_text(encoding="utf-8"))
        loads = LoadVector(np.asarray(d["pd"], dtype=float), np.asarray(d["qd"], dtype=float))
        if loads.pd.shape != (net.n_bus,) or loads.qd.shape != (net.n_bus,):
            raise UsageError(f"load file must give {net.n_bus} pd and qd values")
    else:
        base = net.nominal_loads
        loads = LoadVector(base.pd * c["alpha"], base.qd * c["alpha"])
    res = solve_acopf(net, loads)
    rep = constraint_violations(net, res.point, loads)
    write_json(Path(c["out"]), {"case": net.name, "alpha": c["alpha"], "result": res.to_dict()})
    print(f"{net.name}: status {res.status.value}, objective {res.objective:.6f}, {res.iterations} iterations")
    print("max violation (pu): " + ", ".join(f"{f} {rep.max[f]:.2e}" for f in FAMILIES))
    if not res.converged:
        print(f"solver did not converge ({res.status.value})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gen(c: dict) -> int:
    net = resolve_case(c["case"])
    if c["n"] < 5:
        raise UsageError("N must be at least 5")
    t0 = time.perf_counter()
    ds = generate_dataset(net, int(c["n"]), (float(c["alpha_min"]), float(c["alpha_max"])), c["sigma"],
                          int(c["seed"]), int(c["T"]), workers=int(c["workers"]))
    ds = split_dataset(ds, float(c["split_ratio"]), int(c["seed"]))
    out = Path(c["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    print(f"{net.name}: {len(ds)} samples ({ds.options['failures']} redrawn) -> {out}")
    log.info("generation took %.1f s", time.perf_counter() - t0)
    return EXIT_OK


def cmd_ci(c: dict) -> int:
    ds = load_dataset(c["dataset"])
    if len(ds) < 2:
        raise UsageError("CI analysis needs at least two samples")
    table = generator_ci_table(ds, float(c["tol"]), c["basis"], int(c["max_pieces"]))
    out = Path(c["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table.to_csv(), encoding="utf-8")
    cum = table.cumulative
    print(f"{table.case}: p=1 {cum['p1']:.1f}%, p<=2 {cum['p_le2']:.1f}%, p<=3 {cum['p_le3']:.1f}% -> {out}")
    return EXIT_OK


def train_config(c: dict) -> TrainConfig:
    if c["kind"] not in KINDS:
        raise UsageError(f"unknown model kind {c['kind']!r}; choose from {', '.join(KINDS)}")
    kw = {k: c[k] for k in ("kind", "epochs", "batch_size", "lr", "seed", "rho", "dual_period", "patience",
                            "T", "activation", "width_factor", "hidden", "embed", "teacher_forcing")}
    if c["lambda_init"] is not None:
        kw["lambda_init"] = c["lambda_init"]
    return TrainConfig(**kw)


def cmd_train(c: dict) -> int:
    ds = load_dataset(c["dataset"])
    cfg = train_config(c)
    model, rep = train(ds, cfg)
    out = Path(c["out"] or f"run/{cfg.kind}")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", model,
                    {"head": cfg.head, "case": ds.net.name, "train_config": cfg.to_dict()})
    write_json(out / "train_report.json", rep.to_dict())
    print(f"{cfg.kind} seed {cfg.seed}: {rep.epochs_run} epochs, best {rep.best_epoch}, "
          f"train loss {rep.final_train_loss:.3e}, test loss {rep.final_test_loss:.3e} -> {out}")
    print(f"wall time {rep.wall_time:.1f} s", file=sys.stderr)
    return EXIT_OK


def load_predictor(spec: str, ds: OpfDataset):
    if spec == "truth-echo":
        return TruthEcho(ds)
    p = Path(spec)
    if not p.is_file():
        raise UsageError(f"checkpoint {p} not found")
    model, extra = load_checkpoint(p)
    head = extra.get("head") or ("full" if getattr(model, "T", None) else "setpoints")
    return Predictor(model, ds.net, head)


def cmd_eval(c: dict) -> int:
    if c["checkpoint"] is None:
        raise UsageError("a checkpoint (or 'truth-echo') is required")
    ds = load_dataset(c["dataset"])
    pred = load_predictor(c["checkpoint"], ds)
    rep = evaluate_model(pred, ds, workers=int(c["workers"]), project=bool(c["project"]))
    if c["out"]:
        out = Path(c["out"])
    elif c["checkpoint"] == "truth-echo":
        out = Path("run/truth-echo")
    else:
        out = Path(c["checkpoint"]).parent
    write_json(out / "eval.json", rep.to_dict())
    (out / "eval.csv").write_text(rep.to_csv(), encoding="utf-8")
    if c["svg"]:
        G = ds.net.n_gen
        series = {"prediction": (np.arange(G), rep.per_gen_error)}
        if rep.per_gen_lf_error:
            series["load flow"] = (np.arange(G), rep.per_gen_lf_error)
        write_chart(out / "eval_per_gen.svg", series, f"{ds.net.name}: per-generator error", "generator",
                    "error (%)", scatter=True)
    kcl = "n/a" if rep.kcl_violation is None else f"{rep.kcl_violation:.3e}"
    print(f"pred {rep.pred_error:.4f}%  LF {rep.lf_error:.4f}%  gap {rep.opt_gap:.5f}%  "
          f"bound {rep.bound_violation:.3e}  KCL {kcl}  failed projections {rep.projection_failures} -> {out}")
    return EXIT_OK


def _find_baseline_eval(run: Path) -> Optional[dict]:
    for ck in sorted(run.glob("*/checkpoint.json")):
        ev = ck.parent / "eval.json"
        if not ev.is_file():
            continue
        extra = json.loads(ck.read_text(encoding="utf-8")).get("extra", {})
        if extra.get("head") == "setpoints" and extra.get("train_config", {}).get("kind") == "fcc":
            return json.loads(ev.read_text(encoding="utf-8"))
    return None


def _builtin_names() -> List[str]:
    from importlib import resources

    return sorted(p.name[:-2] for p in resources.files("opflab.cases").iterdir() if p.name.endswith(".m"))


def cmd_report(c: dict) -> int:
    if c["run_dir"] is None:
        raise UsageError("a run directory is required")
    run = Path(c["run_dir"])
    if not (run / "dataset.jsonl").is_file():
        raise UsageError(f"{run} holds no dataset.jsonl")
    ds = load_dataset(run / "dataset.jsonl")
    if not ds.has_split:
        raise UsageError("dataset has no train/test split")
    out = Path(c["out"] or run / "report")
    out.mkdir(parents=True, exist_ok=True)
    net = ds.net
    base_cfg = TrainConfig(kind="fcc", seed=int(c["seed"]), epochs=int(c["epochs"]))

    # complexity index against per-generator error
    table = generator_ci_table(ds, float(c["tol"]))
    ev = _find_baseline_eval(run)
    if ev is None:
        model, _ = train(ds, base_cfg)
        ev = evaluate_model(Predictor(model, net, "setpoints"), ds, project=False).to_dict()
    corr = ci_error_correlation(table, ev["per_gen_error"])
    write_csv(out / "fig2_ci_error.csv", ["rank", "gen", "p", "omega", "error", "spearman"],
              [(k, r["gen"], r["p"], r["omega"], r["error"], corr["rho"]) for k, r in enumerate(corr["points"])])
    write_chart(out / "fig2_ci_error.svg",
                {"error": (np.arange(len(corr["points"])), [r["error"] for r in corr["points"]])},
                f"{net.name}: error by CI rank (rho {corr['rho']:.2f})", "generators sorted by CI", "error (%)",
                scatter=True)

    # model size sweep
    try:
        factors = [int(f) for f in str(c["widths"]).split(",")]
    except ValueError:
        raise UsageError("widths must be a comma separated list of integers") from None
    rows = model_size_sweep(ds, [f * net.n_bus for f in factors], base_cfg)
    write_csv(out / "fig3_size_sweep.csv", ["width", "params", "gen", "error"],
              [(r["width"], r["params"], r["gen"], r["error"]) for r in rows])
    series = {}
    for g in range(net.n_gen):
        sel = [r for r in rows if r["gen"] == g]
        series[f"gen {g}"] = ([r["params"] for r in sel], [r["error"] for r in sel])
    write_chart(out / "fig3_size_sweep.svg", series, f"{net.name}: error against model size", "parameters",
                "error (%)")

    # binding constraints along the load sweep
    scan = binding_constraint_scan(ds, float(c["tol_bind"]))
    names = sorted(scan["intervals"])
    write_csv(out / "fig4_binding_scan.csv", ["constraint", "alpha_start", "alpha_end"],
              [(nm, a, b) for nm in names for a, b in scan["intervals"][nm]])
    G = net.n_gen
    alphas = [s["alpha"] for s in scan["samples"]]
    order = np.argsort(ds.alphas(), kind="stable")
    pg = ds.setpoints(order)[:, :G]
    write_chart(out / "fig4_binding_scan.svg", {f"gen {g}": (alphas, pg[:, g]) for g in range(G)},
                f"{net.name}: dispatch along the load sweep ({len(names)} constraints bind)", "load multiplier",
                "pg (pu)", scatter=True)

    # parameter footprint
    cases = {name: builtin_case(name) for name in _builtin_names()}
    cases.setdefault(net.name, net)
    prow = param_table(cases)
    write_csv(out / "table4_params.csv", ["case", "n_bus", "n_gen", "fcc_params", "rnn_params", "ratio"],
              [(r["case"], r["n_bus"], r["n_gen"], r["fcc_params"], r["rnn_params"], r["ratio"]) for r in prow])
    print(f"report for {net.name}: 4 artifacts -> {out}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "gen": cmd_gen, "ci": cmd_ci, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report}


# ---------------------------------------------------------------------------
# parser


def _bool_flag(p, name, help_):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_true", default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opflab", description="Learn and evaluate AC optimal power flow proxies.")
    ap.add_argument("--version", action="version", version=f"opflab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with defaults (flags override)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="solve one AC-OPF instance")
    p.add_argument("--case")
    p.add_argument("--alpha", type=float, help="uniform load multiplier")
    p.add_argument("--loads", help="JSON file with pd and qd arrays in pu")

    p = sub.add_parser("gen", parents=[common], help="generate a split dataset")
    p.add_argument("--case")
    p.add_argument("--n", "-N", dest="n", type=int, help="number of solved samples")
    p.add_argument("--alpha-min", type=float)
    p.add_argument("--alpha-max", type=float)
    p.add_argument("--sigma", type=float, help="relative per-bus load noise")
    p.add_argument("--T", type=int, help="trajectory snapshots per sample")
    p.add_argument("--split-ratio", type=float)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("ci", parents=[common], help="complexity index table")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--tol", type=float)
    p.add_argument("--basis", choices=("capacity", "observed"))
    p.add_argument("--max-pieces", type=int)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--kind")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-init", type=float, help="initial multiplier for every constraint family")
    p.add_argument("--rho", type=float)
    p.add_argument("--dual-period", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--activation", choices=("relu", "tanh"))
    p.add_argument("--width-factor", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed", type=int)
    _bool_flag(p, "teacher-forcing", "feed targets instead of predictions between units")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("checkpoint", nargs="?", help="checkpoint file or 'truth-echo'")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--workers", type=int)
    _bool_flag(p, "svg", "also write a per-generator SVG plot")
    p.add_argument("--no-project", dest="project", action="store_false", default=None,
                   help="skip load-flow projections")

    p = sub.add_parser("report", parents=[common], help="figures and tables for a run directory")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--widths", help="hidden widths as multiples of the bus count, e.g. 1,2,4")
    p.add_argument("--tol", type=float)
    p.add_argument("--tol-bind", type=float)
    p.add_argument("--epochs", type=int)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = merge_config(args.command, args)
        return COMMANDS[args.command](conf)
    except (SolverError, TooManyFailures, NonFiniteLoss, AngleGuardError, NegativeLoadFactor) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CaseError, ShapeMismatch, DegenerateInput, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
