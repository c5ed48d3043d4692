import csv
import json

import pytest
from conftest import TWO_BUS_CASE, linear_dataset

from opflab.cli import main


@pytest.fixture
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture(scope="module")
def kink_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    assert main(["gen", "--case", "kink6", "-N", "40", "--seed", "3", "--out", str(run / "dataset.jsonl")]) == 0
    return run


def test_solve_case30(in_tmp, capsys):
    assert main(["solve", "--case", "case30"]) == 0
    out = capsys.readouterr().out
    assert "status Converged" in out and "objective" in out
    d = json.loads((in_tmp / "solve.json").read_text())
    assert d["result"]["status"] == "Converged"


def test_solve_is_idempotent(in_tmp):
    assert main(["solve", "--case", "kink6", "--out", "a.json"]) == 0
    assert main(["solve", "--case", "kink6", "--out", "b.json"]) == 0
    assert (in_tmp / "a.json").read_bytes() == (in_tmp / "b.json").read_bytes()


def test_solve_inverted_voltage_bounds(in_tmp, capsys):
    bad = TWO_BUS_CASE.replace("1.05\t0.95;\n\t2", "0.95\t1.05;\n\t2")
    (in_tmp / "bad.m").write_text(bad)
    assert main(["solve", "--case", "bad.m"]) == 2
    assert "voltage" in capsys.readouterr().err.lower()


def test_solve_unknown_case(in_tmp):
    assert main(["solve", "--case", "no_such_case"]) == 2


def test_solve_loads_file(in_tmp):
    (in_tmp / "loads.json").write_text(json.dumps({"pd": [0.0, 0.4], "qd": [0.0, 0.0]}))
    assert main(["solve", "--case", "toy2", "--loads", "loads.json"]) == 0
    (in_tmp / "short.json").write_text(json.dumps({"pd": [0.4], "qd": [0.0]}))
    assert main(["solve", "--case", "toy2", "--loads", "short.json"]) == 2


def test_solve_numerical_failure(in_tmp):
    # far beyond generation capacity
    assert main(["solve", "--case", "kink6", "--alpha", "5"]) == 3


def test_gen_case30(in_tmp):
    assert main(["gen", "--case", "case30", "-N", "50", "--workers", "4", "--out", "d.jsonl"]) == 0
    lines = (in_tmp / "d.jsonl").read_text().splitlines()
    assert len(lines) == 51
    head = json.loads(lines[0])
    assert head["options"]["N"] == 50


def test_gen_too_small(in_tmp):
    assert main(["gen", "--case", "toy2", "-N", "4"]) == 2


def test_gen_seed_repeat_byte_identical(in_tmp):
    args = ["gen", "--case", "toy2", "-N", "8", "--seed", "5"]
    assert main(args + ["--out", "a.jsonl"]) == 0
    assert main(args + ["--out", "b.jsonl"]) == 0
    assert (in_tmp / "a.jsonl").read_bytes() == (in_tmp / "b.jsonl").read_bytes()


def test_ci_kink_case(kink_run, in_tmp):
    assert main(["ci", str(kink_run / "dataset.jsonl"), "--out", "ci.csv"]) == 0
    rows = list(csv.DictReader((in_tmp / "ci.csv").open()))
    assert len(rows) == 6
    p = [int(r["p"]) for r in rows]
    # three pinned units are single pieces; the others carry the kinks
    assert p[:3] == [1, 1, 1]
    assert all(q >= 2 for q in p[3:])
    assert float(rows[0]["share_p1"]) == 50.0


def test_ci_empty_dataset(kink_run, in_tmp):
    head = (kink_run / "dataset.jsonl").read_text().splitlines()[0]
    (in_tmp / "empty.jsonl").write_text(head + "\n")
    assert main(["ci", "empty.jsonl"]) == 2


def test_train_linear_fixture(in_tmp):
    linear_dataset().save(in_tmp / "lin.jsonl")
    assert main(["train", "lin.jsonl", "--epochs", "200", "--out", "fcc"]) == 0
    rep = json.loads((in_tmp / "fcc" / "train_report.json").read_text())
    assert rep["final_train_loss"] < 1e-4
    assert "wall_time" not in rep
    assert (in_tmp / "fcc" / "checkpoint.json").is_file()


def test_train_unknown_kind(kink_run, in_tmp):
    assert main(["train", str(kink_run / "dataset.jsonl"), "--kind", "transformer"]) == 2


def test_train_rnn_single_unit(kink_run, in_tmp):
    assert main(["train", str(kink_run / "dataset.jsonl"), "--kind", "rnn", "--T", "1", "--epochs", "5",
                 "--out", "rnn"]) == 0
    ck = json.loads((in_tmp / "rnn" / "checkpoint.json").read_text())
    assert ck["config"]["T"] == 1


def test_eval_truth_echo(kink_run, in_tmp):
    assert main(["eval", "truth-echo", str(kink_run / "dataset.jsonl"), "--out", "echo", "--svg"]) == 0
    rep = json.loads((in_tmp / "echo" / "eval.json").read_text())
    assert rep["pred_error"] == 0.0
    assert rep["lf_error"] < 0.01
    assert (in_tmp / "echo" / "eval_per_gen.svg").read_text().startswith("<svg")


def test_eval_shape_mismatch(kink_run, in_tmp, capsys):
    linear_dataset().save(in_tmp / "lin.jsonl")
    assert main(["train", "lin.jsonl", "--epochs", "2", "--out", "toy"]) == 0
    assert main(["eval", "toy/checkpoint.json", str(kink_run / "dataset.jsonl")]) == 2
    assert "needs 12 -> 12" in capsys.readouterr().err


def test_report_artifacts(kink_run):
    ds = str(kink_run / "dataset.jsonl")
    assert main(["train", ds, "--epochs", "30", "--out", str(kink_run / "fcc")]) == 0
    assert main(["eval", str(kink_run / "fcc" / "checkpoint.json"), ds, "--no-project"]) == 0
    assert main(["report", str(kink_run), "--widths", "2,4", "--epochs", "20"]) == 0
    rep = kink_run / "report"
    for stem in ("fig2_ci_error", "fig3_size_sweep", "fig4_binding_scan"):
        assert (rep / f"{stem}.csv").is_file() and (rep / f"{stem}.svg").is_file()
    rows = list(csv.DictReader((rep / "table4_params.csv").open()))
    assert {r["case"] for r in rows} >= {"case30", "kink6"}
    assert all(int(r["fcc_params"]) > int(r["rnn_params"]) for r in rows)
    sweep = list(csv.DictReader((rep / "fig3_size_sweep.csv").open()))
    assert len(sweep) == 2 * 6


def test_report_empty_dir(in_tmp):
    (in_tmp / "empty").mkdir()
    assert main(["report", "empty"]) == 2


def test_config_file_layering(in_tmp):
    (in_tmp / "c.toml").write_text('seed = 5\n[gen]\ncase = "toy2"\nn = 6\nout = "cfg.jsonl"\n')
    assert main(["gen", "--config", "c.toml", "-N", "7"]) == 0
    head = json.loads((in_tmp / "cfg.jsonl").read_text().splitlines()[0])
    assert head["options"]["N"] == 7 and head["seed"] == 5
    (in_tmp / "bad.toml").write_text('[gen]\nbogus = 1\n')
    assert main(["gen", "--config", "bad.toml", "--case", "toy2"]) == 2


def test_bad_arguments():
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
