import csv
import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from pmcspheres import cli
from pmcspheres.cli import ConfigError, ProblemConfig

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
GOLDEN = Path(__file__).resolve().parent / "golden"


def write_config(tmp_path, data, name="config.json") -> str:
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def base_config(**overrides):
    data = {"dim": 2, "metric": {"name": "euclidean"}, "f": "1 + x1^2 + x2^2",
            "r_grid": {"min": 0.005, "max": 0.04, "count": 4, "spacing": "log"}}
    data.update(overrides)
    return data


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


# --------------------------------------------------------------------------
# configuration


def problems_of(data):
    with pytest.raises(ConfigError) as info:
        ProblemConfig.from_dict(data)
    return dict(info.value.problems)


def test_parse_error_reports_offset():
    probs = problems_of(base_config(f="1 + x1 +"))
    assert "offset 8" in probs["f"]


def test_schema_errors_carry_paths():
    probs = problems_of({"dim": 4, "metric": {"name": "euclidean"}, "fx": "1"})
    assert probs == {"dim": "4 is not one of [2, 3]", "f": "required field is missing", "fx": "unknown field"}


def test_metric_expression_path():
    data = base_config(metric={"name": "diagonal", "exprs": ["1", "1 + x3^2"]})
    probs = problems_of(data)
    assert "metric.exprs[1]" in probs


def test_semantic_checks():
    assert "r_grid.max" in problems_of(base_config(r_grid={"min": 0.01, "max": 0.3, "count": 4}))
    assert "f" in problems_of(base_config(f="x1^2 - 1"))
    assert "r_grid" in str(problems_of(base_config(r_grid={"min": 0.05, "max": 0.01, "count": 4})))


def test_config_defaults_round_trip():
    cfg = ProblemConfig.from_dict(base_config())
    again = ProblemConfig.from_dict(cfg.as_dict())
    assert again.as_dict() == cfg.as_dict()
    assert cfg.L == 16 and cfg.mode == "auto"
    np.testing.assert_allclose(cfg.r_grid.values(), np.geomspace(0.005, 0.04, 4))


def test_linear_grid():
    cfg = ProblemConfig.from_dict(base_config(r_grid={"min": 0.01, "max": 0.04, "count": 4, "spacing": "linear"}))
    np.testing.assert_allclose(cfg.r_grid.values(), [0.01, 0.02, 0.03, 0.04])


def test_bundled_configs_are_valid():
    for path in sorted(CONFIGS.glob("*.json")):
        ProblemConfig.load(path)


def test_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["solve", "--config", write_config(tmp_path, base_config(f="1 + x1 +"))]) == 1
    assert "config error at f" in capsys.readouterr().err
    assert cli.main(["solve", "--config", str(tmp_path / "missing.json")]) == 1
    (tmp_path / "bad.json").write_text("{not json", encoding="utf-8")
    assert cli.main(["index", "--config", str(tmp_path / "bad.json")]) == 1


# --------------------------------------------------------------------------
# solve


def test_solve_writes_outputs(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["solve", "--config", str(CONFIGS / "euclidean_quadratic.json"), "--out", str(out)]) == 0
    rows = read_rows(out / "leaves.csv")
    assert len(rows) == 11
    assert all(float(r[3]) <= 1e-8 for r in rows[1:])
    assert sorted(p.name for p in (out / "coeffs").iterdir()) == sorted(f"leaf_{k}.csv" for k in range(10))
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "ok" and report["mode"]["mode"] == "nondegenerate"


@pytest.mark.parametrize("name", ["euclidean_quadratic", "conformal_default"])
def test_leaves_match_golden(tmp_path, name):
    out = tmp_path / name
    assert cli.main(["solve", "--config", str(CONFIGS / f"{name}.json"), "--out", str(out)]) == 0
    got, want = read_rows(out / "leaves.csv"), read_rows(GOLDEN / f"{name}_leaves.csv")
    assert got[0] == want[0] == ["r", "tau_1", "tau_2", "residual_sup", "pi_residual", "G_norm", "kernel_part",
                                 "inner_iters", "inner_total", "outer_iters"]
    assert len(got) == len(want)
    for g, w in zip(got[1:], want[1:]):
        assert g[0] == w[0]
        np.testing.assert_allclose([float(x) for x in g[1:3]], [float(x) for x in w[1:3]], rtol=1e-9, atol=1e-12)
        assert all(float(x) <= 1e-8 for x in g[3:7])
        assert all(abs(int(a) - int(b)) <= 1 for a, b in zip(g[7:], w[7:]))


def test_solve_is_byte_reproducible(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.main(["solve", "--config", str(CONFIGS / "conformal_default.json"), "--out", str(out)]) == 0
    for rel in ["leaves.csv", "report.json", "coeffs/leaf_0.csv", "coeffs/leaf_9.csv"]:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()


def test_solve_refuses_noncritical_point(tmp_path, capsys):
    out = tmp_path / "nc"
    assert cli.main(["solve", "--config", str(CONFIGS / "no_critical_point.json"), "--out", str(out)]) == 1
    assert "not a critical point" in capsys.readouterr().err
    assert json.loads((out / "report.json").read_text())["status"] == "refused"


def test_solve_refuses_zero_index(tmp_path, capsys):
    assert cli.main(["solve", "--config", write_config(tmp_path, base_config(f="1 + x1^3 + x2^2"))]) == 1
    assert "zero index" in capsys.readouterr().err


def test_partial_family_exit_code(tmp_path):
    data = base_config(metric={"name": "conformal", "epsilon": 0.5}, f="1 + x1^2 + 2*x2^2 + x1^3",
                       r_grid={"min": 0.01, "max": 0.24, "count": 3}, tolerances={"inner_max_iter": 3})
    out = tmp_path / "partial"
    assert cli.main(["solve", "--config", write_config(tmp_path, data), "--out", str(out)]) == 2
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "partial" and report["failed_r"] is not None
    assert len(read_rows(out / "leaves.csv")) == 1 + report["leaves"]


def test_constant_f_solve(tmp_path):
    out = tmp_path / "const"
    assert cli.main(["solve", "--config", write_config(tmp_path, base_config(f="2")), "--out", str(out)]) == 0
    rows = read_rows(out / "leaves.csv")
    assert all(float(r[1]) == 0 and float(r[2]) == 0 for r in rows[1:])


def test_degenerate_solve_command(tmp_path):
    out = tmp_path / "monkey"
    assert cli.main(["solve", "--config", str(CONFIGS / "monkey_saddle.json"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mode"]["mode"] == "degenerate" and report["mode"]["index"]["degree"] == -2
    assert report["max_residual"] <= 1e-8


# --------------------------------------------------------------------------
# index


@pytest.mark.parametrize("f,degree", [("1 + x1^2 + x2^2", 1), ("10 + x1^3 - 3*x1*x2^2", -2)])
def test_index_command(tmp_path, capsys, f, degree):
    assert cli.main(["index", "--config", write_config(tmp_path, base_config(f=f))]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == f"degree {degree}" and lines[1] == "homotopy_ok true" and lines[2].startswith("rho ")


def test_index_command_refuses(tmp_path):
    assert cli.main(["index", "--config", str(CONFIGS / "no_critical_point.json")]) == 1


# --------------------------------------------------------------------------
# verify


def test_verify_passes_on_default_config(tmp_path):
    out = tmp_path / "v"
    assert cli.main(["verify", "--config", str(CONFIGS / "conformal_default.json"), "--out", str(out),
                     "--jobs", "4"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] and set(report["checks"]) == set(cli.VERIFY_CHECKS)
    assert report["checks"]["foliation"]["tau_slope_status"] == "pass"


def test_verify_underresolved_grid_names_expansion(tmp_path):
    data = json.loads((CONFIGS / "conformal_default.json").read_text())
    data["L"] = 2
    out = tmp_path / "v2"
    assert cli.main(["verify", "--config", write_config(tmp_path, data), "--out", str(out), "--jobs", "4"]) == 2
    report = json.loads((out / "report.json").read_text())
    assert "expansions" in report["failing"]
    assert report["checks"]["expansions"]["status"] == "fail"


def test_verify_constant_f_skips_slope(tmp_path):
    out = tmp_path / "vc"
    data = base_config(f="2", r_grid={"min": 0.005, "max": 0.04, "count": 4})
    assert cli.main(["verify", "--config", write_config(tmp_path, data), "--out", str(out), "--jobs", "4"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["checks"]["foliation"]["tau_slope_status"] == "skipped"


def test_verify_report_independent_of_jobs(tmp_path):
    data = base_config(r_grid={"min": 0.005, "max": 0.04, "count": 4})
    cfg = write_config(tmp_path, data)
    for jobs in ("1", "3"):
        assert cli.main(["verify", "--config", cfg, "--out", str(tmp_path / jobs), "--jobs", jobs]) == 0
    assert (tmp_path / "1" / "report.json").read_bytes() == (tmp_path / "3" / "report.json").read_bytes()


@pytest.mark.skipif(shutil.which("pmcspheres") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["pmcspheres", "index", "--config", str(CONFIGS / "euclidean_quadratic.json")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.startswith("degree 1")
