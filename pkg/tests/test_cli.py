from __future__ import annotations

import json
import subprocess
import sys

import pytest
import yaml

from vmblimit.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_PROPERTY, main

from conftest import CACHE_DIR

BASE = {
    "n_x": [8],
    "n_v": 8,
    "cache_dir": str(CACHE_DIR),
    "epsilons": [0.4, 0.2, 0.1],
    "solver": {"dt": 0.05, "t_end": 0.1, "checkpoint_every": 1},
    "diagnostics": {"n_max": 1},
}


def config(tmp_path, **over):
    d = json.loads(json.dumps(BASE))
    d.update(over)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(d))
    return p


def test_simulate_writes_outputs(tmp_path):
    out = tmp_path / "out"
    rc = main(["simulate", "--config", str(config(tmp_path)), "--out", str(out), "--seed", "3", "--threads", "1"])
    assert rc == EXIT_OK
    assert (out / "series.csv").read_text().splitlines()[0].startswith("t,E0,E1,D0,D1,gauss_residual,shifted_field")
    assert (out / "macro.csv").exists()
    assert (out / "state_2.ckpt").exists()


def test_sweep_and_expand_write_rates(tmp_path):
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(config(tmp_path)), "--out", str(out)]) == EXIT_OK
    rates = json.loads((out / "rates.json").read_text())
    assert {"epsilons", "errors", "slope", "intercept", "residual", "eta", "error_order", "metadata"} <= set(rates)
    assert "wall_seconds" not in rates["metadata"]
    assert set(json.loads((out / "timing.json").read_text())) == {"0.4", "0.2", "0.1"}
    out2 = tmp_path / "out2"
    assert main(["expand", "--config", str(config(tmp_path)), "--out", str(out2)]) == EXIT_OK
    assert "reassembly_defects" in json.loads((out2 / "rates.json").read_text())


def test_sweep_rerun_is_bitwise(tmp_path):
    cfg = config(tmp_path)
    for name in ("a", "b"):
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / "rates.json").read_bytes() == (tmp_path / "b" / "rates.json").read_bytes()


def test_slope_outside_expected_band_exits_1(tmp_path):
    cfg = config(tmp_path, expected_slope=[10.0, 11.0])
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_PROPERTY


def test_verify_pass_and_fail(tmp_path):
    ok = config(tmp_path, checks=["projection", "sobolev"])
    assert main(["verify", "--config", str(ok), "--out", str(tmp_path / "a")]) == EXIT_OK
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["passed"] and len(rep["records"]) == 4
    bad = config(tmp_path, checks=["grad_bound", "projection"], kernel={"angular_profile": "constant"})
    assert main(["verify", "--config", str(bad), "--out", str(tmp_path / "b")]) == EXIT_PROPERTY
    rep = json.loads((tmp_path / "b" / "report.json").read_text())
    assert not rep["passed"] and sum(r["passed"] for r in rep["records"]) == 3


def test_verify_empty_selection(tmp_path):
    cfg = config(tmp_path, checks=[])
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert json.loads((tmp_path / "o" / "report.json").read_text()) == {"passed": True, "records": [], "sigma0": None}


@pytest.mark.parametrize("args,over", [
    ([], {"bogus_key": 1}),
    ([], {"recipe": {"amplitude": 1.0}}),
    (["--seed", "-1"], {}),
    (["--seed", str(2**64)], {}),
    (["--threads", "0"], {}),
    ([], {"checks": ["nope"]}),
])
def test_config_errors_exit_2(tmp_path, capsys, args, over):
    cfg = config(tmp_path, **over)
    cmd = "verify" if "checks" in over else "simulate"
    assert main([cmd, "--config", str(cfg), "--out", str(tmp_path / "o")] + args) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.yaml")]) == EXIT_CONFIG


def test_cfl_violation_exits_3(tmp_path, capsys):
    cfg = config(tmp_path, B_background=[0.0, 0.0, 400.0], epsilon=1.0, solver={"dt": 0.1, "t_end": 0.1})
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL
    assert "numerical abort" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    cfg = config(tmp_path, checks=[])
    proc = subprocess.run([sys.executable, "-m", "vmblimit.cli", "verify", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    bad = subprocess.run([sys.executable, "-m", "vmblimit.cli", "frobnicate"], capture_output=True, text=True)
    assert bad.returncode == 2
