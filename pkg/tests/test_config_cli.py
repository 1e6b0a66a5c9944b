import json
import subprocess
import sys

import pytest
import yaml

from manifold_control.cli import run
from manifold_control.config import dump_preset, load_config, parse_config, preset_config
from manifold_control.errors import ConfigError

FOLD = """
field: {builtin: taylor_green}
saddle_guess: [0.9, 0.1]
manifold: {kind: stable, p_bound: -1.0, time_anchor: -1.0, anchor: [1.0, 0.5]}
desired: {offset: ["exp(-p)*cos(t-p)", "3*sin(8*p)*t"]}
eps: [0.1]
grid: {p: [-1, 1, 11], t: [-1, 0, 5]}
"""


def test_presets_parse():
    cfg = preset_config("taylor_green_stable")
    assert cfg.kind == "stable" and cfg.time_anchor == -1.0 and cfg.p_bound == -1.0
    assert cfg.eps == [0.05]
    again = parse_config(yaml.safe_load(dump_preset("taylor_green_mirror")))
    assert again.kind == "unstable" and again.ftle.tau == -1.0


@pytest.mark.parametrize(
    "patch, message",
    [
        ({"eps": [-0.1]}, "nonnegative"),
        ({"manifold": {"kind": "stable", "p_bound": -1, "time_anchor": 0.5}}, "time_anchor < 0"),
        ({"desired": {"offset": ["exp(-q)", "0"]}}, "unknown name"),
        ({"field": {"expression": ["x", "y"]}}, "domain"),
        ({"control": {"extension": "analytic"}}, "override"),
        ({"grid": {"p": [0, 1, 2.5]}}, "integer"),
    ],
)
def test_config_errors(patch, message):
    raw = yaml.safe_load(dump_preset("taylor_green_stable"))
    raw.update(patch)
    with pytest.raises(ConfigError, match=message):
        parse_config(raw)


def test_yaml_error_has_location(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("field: [1, 2\neps: 3\n")
    with pytest.raises(ConfigError, match=r"bad.yaml:\d+:\d+"):
        load_config(p)


def test_cli_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("field: {builtin: taylor_green}\n")
    assert run(["validate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_fold_exit_code(tmp_path):
    p = tmp_path / "fold.yaml"
    p.write_text(FOLD)
    out = tmp_path / "o"
    assert run(["control", "--config", str(p), "--out", str(out)]) == 3
    rep = json.load(open(out / "validation.json"))
    assert rep["eps0.1"]["passed"] is False
    assert not (out / "control_eps0.1.csv").exists()


def test_cli_no_saddle_exit_code(tmp_path):
    p = tmp_path / "centre.yaml"
    p.write_text(FOLD.replace("[0.9, 0.1]", "[0.55, 0.45]"))
    assert run(["validate", "--config", str(p), "--out", str(tmp_path / "o")]) == 3


def test_cli_validate_and_control(tmp_path, capsys):
    out = tmp_path / "o"
    assert run(["control", "--preset", "taylor_green_stable", "--eps", "0.1", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["validation"]["passed"] is True
    report = json.load(open(out / "run_report.json"))
    assert set(report["timings"]) >= {"setup", "validate", "control"}
    header = open(out / "control_eps0.1.csv").readline().strip()
    assert header == "p,t,x,y,g_perp,g_par,g_x,g_y"
    meta = json.load(open(out / "control_eps0.1.json"))
    assert meta["override"] == "taylor_green"


def test_cli_verify_small(tmp_path):
    out = tmp_path / "o"
    code = run(["all", "--eps", "0.05,0.1", "--times", "-0.9", "--grid", "64x32", "--out", str(out)])
    assert code == 0
    rep = json.load(open(out / "run_report.json"))
    assert 1.5 < rep["eps_scaling"]["slope"] < 3.0
    for k in ("eps0.05", "eps0.1"):
        assert rep["bounds"][k]["perp_dominated"] == 1.0
    assert (out / "ftle_eps0.05_t-0.9.pgm").exists()
    assert (out / "ftle_eps0.05_t-0.9_ridge.csv").exists()


def test_cli_argument_errors():
    with pytest.raises(SystemExit) as e:
        run(["verify", "--grid", "12by4"])
    assert e.value.code == 2


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "manifold_control.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("validate", "control", "verify", "all"):
        assert cmd in r.stdout
