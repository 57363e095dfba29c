from __future__ import annotations

import csv
import json

import pytest
from click.testing import CliRunner

from fbsde_smp.cli import clean, dumps, main, run


def invoke(*args, env=None):
    return CliRunner().invoke(main, list(args), env=env)


def test_example_command(tmp_path):
    res = invoke("example", "--c", "0.25", "--d", "1", "--N", "64", "--out", str(tmp_path))
    assert res.exit_code == 0, res.output
    rep = json.loads(res.output)
    assert rep["checks"] == {"global_mp_passes": True, "local_mp_fails": True, "argmin_is_zero": True}
    assert rep["results"]["local"]["worst"]["u"] == -1.0
    assert (tmp_path / "report.json").read_text() == res.output
    assert {p.name for p in tmp_path.iterdir()} >= {"report.json", "lq_ode.csv", "brute_force.csv"}


def test_assumptions_zero_preset():
    res = invoke("assumptions", "--preset", "zero")
    assert res.exit_code == 0
    rep = json.loads(res.output)["results"]
    assert rep["passed"] and rep["t_star"] == "-inf"


def test_spike_orders_csv(tmp_path):
    res = invoke("spike-orders", "--preset", "nonlinear", "--N", "128", "--paths", "500", "--beta", "2",
                 "--out", str(tmp_path))
    assert res.exit_code in (0, 1), res.output
    with open(tmp_path / "spike_orders.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len({(r["statistic"], r["eps"]) for r in rows}) >= 4
    with open(tmp_path / "slopes.csv") as fh:
        assert any(r["statistic"] == "X" for r in csv.DictReader(fh))


def test_check_mp_writes_gaps(tmp_path):
    res = invoke("check-mp", "--preset", "nonlinear", "--N", "16", "--out", str(tmp_path))
    assert res.exit_code == 0
    with open(tmp_path / "gaps.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "index", "t", "x", "u", "gap"] and len(rows) == 1 + 136 * 3


def test_failing_check_exits_one():
    res = invoke("lq", "--preset", "lq-generic", "--N", "16", "--pieces", "0")
    assert res.exit_code == 1 and json.loads(res.output)["passed"] is False


@pytest.mark.parametrize("args,key", [
    (("solve", "--N", "0"), "problem/N"),
    (("solve", "--param", "x"), "params"),
    (("check-mp", "--preset", "nonlinear", "--tolerance", "-1"), "options/tolerance"),
])
def test_usage_errors_name_the_key(args, key):
    res = invoke(*args)
    assert res.exit_code == 2 and key in res.output


def test_config_document(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"problem": {"coefficients": "decoupled", "N": 16}, "seed": 4,
                               "options": {"method": "picard"}}))
    res = invoke("solve", "--config", str(cfg))
    assert res.exit_code == 0
    assert json.loads(res.output)["results"]["picard_iterations"] == 2
    cfg.write_text(json.dumps({"problem": {"coefficients": "zero"}, "extra": 1}))
    assert invoke("solve", "--config", str(cfg)).exit_code == 2
    cfg.write_text("{not json")
    assert invoke("solve", "--config", str(cfg)).exit_code == 2


def test_solver_failure_exit_code(tmp_path):
    cfg = tmp_path / "div.json"
    cfg.write_text(json.dumps({"problem": {"coefficients": {"b": "4*y", "sigma": "1", "g": "4*x", "phi": "4*x"},
                                           "N": 16}, "options": {"method": "picard"}}))
    res = invoke("solve", "--config", str(cfg))
    assert res.exit_code == 3 and "error in fbsde_smp.fbsde" in res.output


def test_threads_variable():
    assert invoke("assumptions", "--preset", "zero", env={"FBSDE_SMP_THREADS": "0"}).exit_code == 2
    res = invoke("assumptions", "--preset", "zero", env={"FBSDE_SMP_THREADS": "3"})
    assert json.loads(res.output)["threads"] == 3


def test_reports_byte_identical(tmp_path):
    outs = []
    d = tmp_path / "out"
    for _ in range(2):
        res = invoke("check-mp", "--preset", "linear-z", "--N", "16", "--seed", "5", "--out", str(d))
        outs.append(((d / "report.json").read_bytes(), (d / "gaps.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_timing_is_opt_in():
    cfg = {"problem": {"coefficients": "zero", "N": 4}}
    assert "wall_time" not in run("solve", cfg).report
    assert "wall_time" in run("solve", cfg, timing=True).report


def test_clean_non_finite():
    assert clean({"a": float("nan"), "b": [float("inf"), -float("inf"), 1]}) == {"a": "nan", "b": ["inf", "-inf", 1]}
    assert dumps({"b": 1, "a": 2}).index('"a"') < dumps({"b": 1, "a": 2}).index('"b"')
