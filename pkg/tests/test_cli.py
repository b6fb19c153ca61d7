import json

import pytest

from convint.cli import RunConfig, dumps, load_config, run
from convint.torus_grid import load_mkfd


def report(tmp_path, name, argv):
    out = tmp_path / f"{name}.json"
    code = run(argv + ["--out", str(out)])
    return code, (json.loads(out.read_text()) if out.exists() else None)


def strip_times(obj):
    if isinstance(obj, dict):
        return {k: strip_times(v) for k, v in obj.items() if k not in ("wall_time", "seconds")}
    if isinstance(obj, list):
        return [strip_times(v) for v in obj]
    return obj


def test_verify_passes_and_is_deterministic(tmp_path):
    code, a = report(tmp_path, "a", ["verify", "--d", "2", "--n", "256"])
    assert code == 0 and a["pass"]
    _, b = report(tmp_path, "b", ["verify", "--d", "2", "--n", "256"])
    assert strip_times(a) == strip_times(b)
    assert {r["suite"] for r in a["records"]} == {"calculus", "mikado"}


@pytest.mark.parametrize("argv", [["nope"], ["verify", "--n", "100"], ["verify", "--K", "4"],
                                  ["verify", "--lambdas", "a,b"], ["verify", "--delta", "-1"]])
def test_config_errors_exit_2(argv):
    assert run(argv) == 2


def test_config_file_with_flag_override(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"command": "verify", "n": 64, "K": 32, "p": 2.0}))
    cfg = load_config(["verify", "--config", str(cfg_file), "--n", "128"])
    assert (cfg.n, cfg.K, cfg.p) == (128, 32, 2.0)
    cfg_file.write_text(json.dumps({"bogus": 1}))
    assert run(["verify", "--config", str(cfg_file)]) == 2


def test_underresolved_mikado_is_config_error():
    assert run(["mikado", "--n", "64", "--lam", "2", "--mu", "2", "--omega", "1", "--nu", "8"]) == 2


def test_infeasible_exponents_exit_3():
    assert run(["step", "--p", "2", "--ptilde", "2", "--n", "64"]) == 3


def test_strict_iteration_exits_4_with_blocking_rule(tmp_path):
    code, rep = report(tmp_path, "it", ["iterate", "--mode", "strict", "--n", "64", "--K", "8",
                                        "--budget-n", "64", "--steps", "1"])
    assert code == 4
    assert rep["error"] == "BudgetExceeded" and "lambda" in rep["blocking"]


def test_mikado_report(tmp_path):
    code, rep = report(tmp_path, "m", ["mikado", "--n", "256", "--lam", "1", "--mu", "2",
                                       "--omega", "1", "--nu", "8"])
    assert code == 0
    assert rep["params"] == {"lambda": 1, "mu": 2.0, "omega": 1.0, "nu": 8}
    assert all(r["pass"] for r in rep["records"])


def test_step_with_explicit_params(tmp_path):
    code, rep = report(tmp_path, "s", ["step", "--n", "128", "--K", "16", "--lam", "1", "--mu", "1",
                                       "--omega", "0.0625", "--nu", "8", "--delta", "1", "--eta", "0.1"])
    assert code == 0
    assert set(rep["report"]["passed"]) == {"rho_Lp", "u_Lpp", "u_W1", "R1_L1"}


def test_seed_dump_round_trip(tmp_path):
    code, rep = report(tmp_path, "seed", ["seed", "--n", "32", "--K", "8", "--dump", str(tmp_path / "d")])
    assert code == 0 and len(rep["dumps"]) == 3
    rho = load_mkfd(rep["dumps"][0])
    assert rho.timegrid.K == 8 and rho.grid.n == 32
    assert abs(rho.snapshot(8)).max() == pytest.approx(1.0)


def test_rates_holder(tmp_path):
    code, rep = report(tmp_path, "h", ["rates", "--lemma", "holder", "--n", "256", "--lambdas", "4,8,16"])
    assert code == 0 and rep["fit"]["pass"]


def test_dumps_handles_non_finite():
    text = dumps({"b": float("inf"), "a": [1.0, float("nan")]})
    assert json.loads(text) == {"a": [1.0, "nan"], "b": "inf"}
    assert text.index('"a"') < text.index('"b"')


def test_runconfig_defaults_validate():
    RunConfig().validate()
