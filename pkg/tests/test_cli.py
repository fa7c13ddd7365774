import csv
import json
from importlib import resources

import jsonschema
import pytest

from empclab.cli import COMMANDS, ConfigError, RunConfig, build_parser, run_command

SCHEMA_NAMES = {"steady", "solve", "simulate", "lqcheck", "report"}


def schema(name):
    return json.loads(resources.files("empclab").joinpath("schemas", f"{name}.schema.json").read_text())


def run(tmp_path, *argv):
    return run_command([*argv, "--out", str(tmp_path), "--jobs", "1"])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def steady_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("steady")
    assert run_command(["steady", "--out", str(out)]) == 0
    return str(out / "steady.json")


def test_steady_command(tmp_path):
    assert run(tmp_path, "steady", "--model", "reactor") == 0
    data = json.loads((tmp_path / "steady.json").read_text())
    jsonschema.validate(data, schema("steady"))
    assert data["x_bar"] == pytest.approx([0.5, 0.5], abs=1e-8)
    assert data["u_bar"] == pytest.approx([12.0], abs=1e-8)
    assert data["lambda_bar"] == pytest.approx([-100.0, -200.0], abs=1e-6)
    assert (tmp_path / "steady.log").exists()


def test_unknown_or_missing_command(capsys):
    assert run_command([]) == 1
    assert run_command(["bogus"]) == 1
    assert "expected one of" in capsys.readouterr().err


def test_validation_errors(tmp_path, steady_file):
    assert run(tmp_path, "solve", "--horizon", "0") == 2
    assert run(tmp_path, "solve", "--x0", "2,0.5") == 2
    assert run(tmp_path, "solve", "--x0", "0.5") == 2
    assert run(tmp_path, "solve", "--scheme", "other") == 2
    assert run(tmp_path, "horizon", "--rho", "-1") == 2
    assert run(tmp_path, "solve", "--tol", "0") == 2
    assert not list(tmp_path.glob("*.csv"))


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scheme": "plain", "horizon": 4, "x0": [0.3, 0.4]}))
    assert run(tmp_path, "solve", "--config", str(cfg), "--horizon", "6") == 0
    data = json.loads((tmp_path / "solve.json").read_text())
    assert data["scheme"] == "plain" and data["horizon"] == 6 and data["x0"] == [0.3, 0.4]
    cfg.write_text(json.dumps({"horizn": 4}))
    assert run(tmp_path, "solve", "--config", str(cfg)) == 2
    with pytest.raises(ConfigError):
        RunConfig(n_cl=0).validate()


def test_infeasible_terminal_solve_exits_3(tmp_path, capsys, steady_file):
    code = run(tmp_path, "solve", "--model", "reactor", "--scheme", "terminal", "--horizon", "1",
               "--x0", "0,0", "--steady", steady_file)
    assert code == 3
    assert "infeas" in capsys.readouterr().err
    data = json.loads((tmp_path / "solve.json").read_text())
    assert data["status"] == "infeasible-detected"


def test_solve_artifacts(tmp_path, steady_file):
    assert run(tmp_path, "solve", "--scheme", "gradcorr", "--horizon", "5", "--x0", "0.2,0.8",
               "--steady", steady_file) == 0
    rows = read_csv(tmp_path / "solve.csv")
    assert rows[0][:6] == ["k", "x_A", "x_B", "u", "lambda_A", "lambda_B"]
    assert rows[0][-1] == "stage_cost"
    assert len(rows) == 1 + 6
    data = json.loads((tmp_path / "solve.json").read_text())
    jsonschema.validate(data, schema("solve"))
    assert data["residuals"]["max"] <= 1e-6


def test_simulate_artifacts(tmp_path, steady_file):
    assert run(tmp_path, "simulate", "--scheme", "gradcorr", "--horizon", "1", "--steps", "50",
               "--steady", steady_file) == 0
    rows = read_csv(tmp_path / "simulate.csv")
    assert rows[0] == ["i", "x_A", "x_B", "u", "V_N", "stage_cost"]
    assert len(rows) == 1 + 51
    data = json.loads((tmp_path / "simulate.json").read_text())
    assert data["complete"] and data["convergence_step"] is not None


def test_lqcheck_artifacts(tmp_path, steady_file, capsys):
    assert run(tmp_path, "lqcheck", "--horizon", "5", "--steady", steady_file) == 0
    out = capsys.readouterr().out
    assert "spectral_radius" in out and "reachable=False" in out
    data = json.loads((tmp_path / "lqcheck.json").read_text())
    assert data["stabilizing"] and data["spectral_radius"] < 1
    rows = read_csv(tmp_path / "lqcheck_adjoint.csv")
    assert rows[0][0] == "k" and len(rows) == 1 + 6


def test_horizon_artifacts(tmp_path, steady_file):
    assert run(tmp_path, "horizon", "--scheme", "plain", "--grid-spacing", "0.5", "--rho", "0.1",
               "--ncl", "60", "--curve-horizons", "2,6", "--steady", steady_file) == 0
    rows = read_csv(tmp_path / "horizon_plain.csv")
    assert rows[0] == ["x0_A", "x0_B", "N"] and len(rows) == 1 + 9
    assert read_csv(tmp_path / "rho_curve_plain.csv")[0] == ["N", "rho"]
    data = json.loads((tmp_path / "horizon_plain.json").read_text())
    jsonschema.validate(data, schema("horizon"))
    assert len(data["rho_curve"]) == 2


def test_report_and_reproducibility(tmp_path, steady_file):
    args = ("report", "--grid-spacing", "0.5", "--ncl", "60", "--sweep-horizons", "4,8,12",
            "--steady", steady_file)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, *args) == 0
    assert run(b, *args) == 0
    rows = read_csv(a / "table.csv")
    assert rows[0] == ["scheme", "label", "minimal_horizon", "criterion", "eventual_deviation"]
    assert [r[0] for r in rows[1:]] == ["terminal", "plain", "gradcorr"]
    data = json.loads((a / "report.json").read_text())
    jsonschema.validate(data, schema("report"))
    assert data["rows"][2]["minimal_horizon"] == 1
    for f in sorted(a.iterdir()):
        if f.suffix in (".csv", ".json"):
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name
        if f.suffix == ".json":
            name = "horizon" if f.stem.startswith("horizon_") else f.stem
            assert name in SCHEMA_NAMES | {"horizon"}, f.name
            jsonschema.validate(json.loads(f.read_text()), schema(name))


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("EMPCLAB_OUT", str(tmp_path / "env"))
    assert run_command(["steady"]) == 0
    assert (tmp_path / "env" / "steady.json").exists()


def test_every_command_has_help():
    for cmd in COMMANDS:
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([cmd, "--help"])
        assert exc.value.code == 0
