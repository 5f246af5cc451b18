from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vmblimit.limit_harness import (
    CHECK_GROUPS,
    ConfigError,
    RecipeConfig,
    RunConfig,
    Workspace,
    cascade_initial,
    fit_rate,
    prepare_data,
    run_epsilon_sweep,
    run_expansion_check,
    run_property_suite,
    simulate,
    split_timing,
    vmb_initial,
    write_json,
)
from vmblimit.em_fields import charge_density, gauss_residual

from conftest import CACHE_DIR


def small(**kw) -> RunConfig:
    base = dict(n_x=(8,), n_v=8, cache_dir=str(CACHE_DIR), epsilons=(0.4, 0.2, 0.1),
                solver={"dt": 0.05, "t_end": 0.2})
    base.update(kw)
    cfg = RunConfig(**base)
    cfg.validate()
    return cfg


@pytest.fixture(scope="module")
def ws():
    return Workspace.build(small())


# ---------------------------------------------------------------- fit_rate


def test_fit_rate_exact_powers():
    eps = [0.4, 0.2, 0.1, 0.05]
    for p in (0.0, 1.0, 2.0):
        slope, _, res = fit_rate([3.0 * e**p for e in eps], eps)
        assert slope == pytest.approx(p, abs=1e-12)
        assert res <= 1e-12


def test_fit_rate_geometric_table():
    slope, icpt, res = fit_rate([4e-2, 2e-2, 1e-2], [0.4, 0.2, 0.1])
    assert slope == pytest.approx(1.0, abs=1e-12)
    assert icpt == pytest.approx(math.log(0.1), abs=1e-12)


@given(st.floats(-3, 3), st.floats(1e-3, 1e3))
def test_fit_rate_recovers_any_power(p, c):
    eps = [0.5, 0.25, 0.125]
    slope, _, res = fit_rate([c * e**p for e in eps], eps)
    assert slope == pytest.approx(p, abs=1e-9)


def test_fit_rate_rejects_bad_input():
    for errors, eps in (([1, 2], [0.2, 0.1]), ([1, 2, 3], [0.2, 0.1]), ([1, 0, 3], [0.3, 0.2, 0.1]),
                        ([1, 2, 3], [0.1, 0.2, 0.3]), ([1, 2, 3], [0.3, 0.3, 0.1])):
        with pytest.raises(ValueError):
            fit_rate(errors, eps)


# ---------------------------------------------------------------- configuration


def test_config_round_trip(tmp_path):
    cfg = small(B_levels=((0.0, 0.1, 0.0),), expansion_order=2, expected_slope=(0.8, 1.2), checks=("projection",))
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    p = tmp_path / "c.yaml"
    p.write_text("n_x: [8]\nn_v: 8\nrecipe: {name: charge_mode, amplitude: 0.001}\nsolver: {dt: 0.1, t_end: 0.2}\n")
    y = RunConfig.from_yaml(p)
    assert y.n_x == (8,) and y.recipe.name == "charge_mode" and y.solver_config().dt == 0.1


@pytest.mark.parametrize("bad", [
    {"nonsense": 1},
    {"recipe": {"name": "unknown"}},
    {"recipe": {"amplitude": 0.5}},
    {"recipe": {"colour": 1}},
    {"epsilons": [0.1, 0.2, 0.05]},
    {"epsilons": [1.5, 0.1]},
    {"epsilon": 0.0},
    {"system": "mhd"},
    {"expansion_order": 0},
    {"expansion_order": 2, "B_levels": [[0, 0, 0], [0, 0, 0]]},
    {"error_order": 4},
    {"n_v": 1},
    {"solver": {"dt": -1.0}},
    {"solver": {"unknown": 1}},
    {"kernel": {"gamma": 2.0}},
    {"diagnostics": {"varrhos": [2.0]}},
    {"expected_slope": [1.0]},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_yaml(tmp_path / "missing.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("n_x: [8\n")
    with pytest.raises(ConfigError):
        RunConfig.from_yaml(p)
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        RunConfig.from_yaml(p)


# ---------------------------------------------------------------- initial data


@pytest.mark.parametrize("name", ["charge_mode", "macro_mode", "transverse_pulse", "random"])
def test_initial_data_compatible(ws, name):
    data = prepare_data(RecipeConfig(name, 1e-3, seed=7), ws.sgrid, ws.vgrid)
    st0 = vmb_initial(data, 0.3, (1.0, 0.0, 0.0), 0.3, 0.3)
    rho = charge_density(st0.f)
    if ws.sgrid.norm(rho) > 0:
        assert gauss_residual(st0.em, rho, ws.sgrid) <= 1e-12
    assert abs(float(np.mean(rho))) <= 1e-15


def test_random_recipe_depends_on_seed(ws):
    a = prepare_data(RecipeConfig("random", 1e-3, seed=1), ws.sgrid, ws.vgrid).base
    b = prepare_data(RecipeConfig("random", 1e-3, seed=1), ws.sgrid, ws.vgrid).base
    c = prepare_data(RecipeConfig("random", 1e-3, seed=2), ws.sgrid, ws.vgrid).base
    assert np.array_equal(a.plus, b.plus)
    assert not np.array_equal(a.plus, c.plus)


def test_cascade_initial_reassembles_to_direct_data(ws):
    data = prepare_data(RecipeConfig("macro_mode", 1e-3), ws.sgrid, ws.vgrid)
    for m in (1, 2):
        c = cascade_initial(data, 0.2, m, (1.0, 0.0, 0.0))
        f, em = c.reassemble()
        scale = 0.2
        assert np.allclose(f.plus, (data.base + data.gap_f * scale).plus, atol=1e-18)


# ---------------------------------------------------------------- sweeps


def test_epsilon_sweep_small(ws):
    cfg = ws.cfg
    rep = run_epsilon_sweep(cfg, ws)
    assert len(rep.errors) == 3 and all(e > 0 and math.isfinite(e) for e in rep.errors)
    assert rep.slope is not None and math.isfinite(rep.slope) and rep.residual is not None
    assert all(len(v) == ws.solver.n_steps + 1 for v in rep.error_series.values())
    # errors shrink with ε on the same grid
    assert rep.errors[0] > rep.errors[1] > rep.errors[2]
    d1, timing = split_timing(rep)
    d2, _ = split_timing(run_epsilon_sweep(cfg, ws))
    assert d1 == d2
    assert set(timing) == {repr(e) for e in cfg.epsilons}


def test_sweep_without_fit_for_two_epsilons(ws):
    cfg = small(epsilons=(0.2, 0.1))
    rep = run_epsilon_sweep(cfg, ws)
    assert rep.slope is None and len(rep.errors) == 2


def test_expansion_matched_data_starts_at_zero(ws):
    cfg = small(recipe=RecipeConfig("macro_mode", 1e-3, gap=0.0))
    rep = run_expansion_check(cfg, ws)
    for series in rep.error_series.values():
        assert series[0] == 0.0
    assert all(d <= 1e-20 for d in rep.reassembly_defects)


def test_expansion_check_small(ws):
    rep = run_expansion_check(ws.cfg, ws)
    assert rep.slope is not None and math.isfinite(rep.slope)
    assert rep.expansion_order == 1
    # reassembly of the cascade tracks the direct solution
    assert all(d <= 1e-3 * e for d, e in zip(rep.reassembly_defects, rep.errors))


# ---------------------------------------------------------------- property suite


def test_property_suite_all_pass(ws):
    rep = run_property_suite(ws.cfg, ws)
    failed = [r.name for r in rep.records if not r.passed]
    assert not failed, failed
    assert rep.sigma0 is not None and rep.sigma0 > 0
    names = {r.name for r in rep.records}
    assert {"grad_bound", "L_coercivity", "gauss_transport", "balance_continuity", "lambda_inversion"} <= names


def test_property_suite_fault_injection():
    cfg = small(kernel={"angular_profile": "constant"})
    rep = run_property_suite(cfg, None, ["grad_bound", "projection", "maxwell", "weights", "sobolev"])
    by = {r.name: r for r in rep.records}
    assert not by["grad_bound"].passed and by["grad_bound"].value > 0
    others = [r for r in rep.records if r.name != "grad_bound"]
    assert len(others) >= 7 and all(r.passed for r in others)
    assert not rep.passed


def test_property_suite_empty_and_unknown():
    rep = run_property_suite(small(), None, [])
    assert rep.records == [] and rep.passed and rep.to_dict() == {"passed": True, "sigma0": None, "records": []}
    with pytest.raises(ConfigError):
        run_property_suite(small(), None, ["vibes"])
    assert set(CHECK_GROUPS) >= {"projection", "operator", "balance"}


def test_property_suite_deterministic():
    cfg = small(seed=11)
    a = run_property_suite(cfg, None, ["projection", "micro_identity", "weights"]).to_dict()
    b = run_property_suite(cfg, None, ["projection", "micro_identity", "weights"]).to_dict()
    assert a == b


# ---------------------------------------------------------------- simulate and outputs


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.mark.parametrize("system", ["vmb", "vpb", "cascade"])
def test_simulate_outputs(tmp_path, ws, system):
    cfg = small(system=system, solver={"dt": 0.05, "t_end": 0.1, "checkpoint_every": 1}, epsilon=0.5)
    w = Workspace(cfg, ws.sgrid, ws.vgrid, ws.model, ws.linop, ws.ops, cfg.solver_config())
    traj = simulate(cfg, tmp_path, w)
    rows = _read_csv(tmp_path / "series.csv")
    assert rows[0] == cfg.diagnostics_config().columns()
    assert len(rows) == 1 + 3 == 1 + len(traj.rows)
    assert sorted(p.name for p in tmp_path.glob("state_*.ckpt")) == ["state_1.ckpt", "state_2.ckpt"]
    macro = _read_csv(tmp_path / "macro.csv")
    assert macro[0] == ["x", "a_plus", "a_minus", "b1", "b2", "b3", "c"] and len(macro) == 9


def test_simulate_resume_bitwise(tmp_path, ws):
    cfg = small(solver={"dt": 0.05, "t_end": 0.2, "checkpoint_every": 2})
    w = Workspace(cfg, ws.sgrid, ws.vgrid, ws.model, ws.linop, ws.ops, cfg.solver_config())
    full, part = tmp_path / "full", tmp_path / "part"
    simulate(cfg, full, w)
    simulate(cfg, part, w)
    (part / "state_4.ckpt").unlink()
    simulate(cfg, part, w, resume=True)
    for name in ("series.csv", "macro.csv", "state_4.ckpt"):
        assert (full / name).read_bytes() == (part / name).read_bytes(), name


def test_write_json_handles_numpy_and_inf(tmp_path):
    p = write_json(tmp_path / "r.json", {"a": np.float64(1.5), "b": [np.int64(2), math.inf], 3: "x"})
    assert json.loads(p.read_text()) == {"a": 1.5, "b": [2, "inf"], "3": "x"}
