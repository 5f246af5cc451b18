"""Acceptance criteria at their stated tolerances; each test reports one PASS/FAIL line."""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from vmblimit.collision_kernel import (
    KernelModel,
    boltzmann_q,
    build_linearized,
    coercivity,
    collision_frequency,
    null_space_residuals,
)
from vmblimit.em_fields import EMState, charge_density, divergence, gauss_residual, poisson_field
from vmblimit.energy_diagnostics import energy_functional
from vmblimit.kinetic_solver import CascadeState, SolverConfig, VMBState, run, step_cascade, step_vmb
from vmblimit.limit_harness import (
    RecipeConfig,
    RunConfig,
    Workspace,
    prepare_data,
    run_epsilon_sweep,
    run_expansion_check,
    run_property_suite,
    simulate,
    vmb_initial,
)
from vmblimit.phase_grid import PairDistribution, VelocityGrid

from conftest import ACCEPTANCE_LINES, CACHE_DIR

pytestmark = pytest.mark.slow

# slope of the squared sweep error fixed by the dt/grid refinement study (see README)
S_STAR = 2.0


def report(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


def default_cfg(**kw) -> RunConfig:
    cfg = RunConfig(cache_dir=str(CACHE_DIR), **kw)
    cfg.validate()
    return cfg


@pytest.fixture(scope="module")
def ws() -> Workspace:
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    return Workspace.build(default_cfg())


def _records(rep) -> dict:
    return {r.name: r for r in rep.records}


def test_criterion_1_operator(tmp_path):
    t0 = time.perf_counter()
    op = build_linearized(VelocityGrid(6.0, 16), KernelModel(), cache_dir=tmp_path)
    ns = float(np.max(null_space_residuals(op)))
    s0 = coercivity(op, n_random=1000, seed=0).sigma0
    wall = time.perf_counter() - t0
    ok = op.asymmetry <= 1e-10 and ns <= 1e-6 and s0 >= 1e-3 and wall <= 60.0
    report(1, ok, f"asymmetry {op.asymmetry:.2e}, null residual {ns:.2e}, sigma0 {s0:.4f}, {wall:.1f} s")
    assert ok


def test_criterion_2_collision_conservation():
    vg = VelocityGrid(6.0, 8)
    model = KernelModel()
    rng = np.random.default_rng(2)
    mu = vg.mu
    F = mu * (1.0 + 0.3 * rng.uniform(-1, 1, size=(100,) + vg.shape))
    Q = boltzmann_q(F, F, vg, model)
    v = vg.nodes
    axes = (-3, -2, -1)

    def rel(weight):
        return float(np.max(np.abs(np.sum(Q * weight, axis=axes)) / np.sum(np.abs(Q * weight), axis=axes)))

    mass = rel(np.ones(vg.shape))
    mom = max(rel(v[..., i]) for i in range(3))
    en = rel(vg.speed2)
    eq = float(np.linalg.norm(boltzmann_q(mu, mu, vg, model)) / np.linalg.norm(collision_frequency(v, model) * mu))
    ok = mass <= 1e-8 and mom <= 1e-6 and en <= 1e-6 and eq <= 1e-6
    report(2, ok, f"mass {mass:.2e}, momentum {mom:.2e}, energy {en:.2e}, Q(mu,mu) {eq:.2e} (100 samples)")
    assert ok


def test_criterion_3_projection_algebra(ws):
    rec = _records(run_property_suite(ws.cfg, ws, ["projection", "micro_identity"]))
    ok = all(r.passed for r in rec.values())
    report(3, ok, ", ".join(f"{k} {r.value:.2e}" for k, r in rec.items()))
    assert ok


def test_criterion_4_field_solver(ws):
    rec = _records(run_property_suite(ws.cfg, ws, ["maxwell"]))
    # Gauss transport over 1000 steps to t = 10 on the coarse velocity lattice of the default spatial grid;
    # the residual is relative to ‖ρ‖, which collisions damp, so the horizon matters as much as the step count
    cfg8 = default_cfg(n_v=8)
    w8 = Workspace.build(cfg8)
    data = prepare_data(RecipeConfig("macro_mode", 1e-3), w8.sgrid, w8.vgrid)
    st = vmb_initial(data, 0.5, cfg8.B_background, 1.0, 1.0)
    sc = SolverConfig(dt=0.01, t_end=10.0, gauss_ceiling=None)
    assert sc.n_steps == 1000
    worst = worst_abs = 0.0
    for _ in range(sc.n_steps):
        st = step_vmb(st, w8.ops, sc)
        rho = charge_density(st.f)
        worst = max(worst, gauss_residual(st.em, rho, w8.sgrid))
        worst_abs = max(worst_abs, w8.sgrid.norm(divergence(st.em.E, w8.sgrid) - rho))
    drift, mod = rec["maxwell_energy_drift"].value, rec["maxwell_modulus"].value
    ok = rec["maxwell_energy_drift"].passed and rec["maxwell_modulus"].passed and worst <= 1e-8
    report(4, ok, f"energy drift/step {drift:.2e}, modulus defect {mod:.2e}, Gauss residual {worst:.2e} "
           f"(absolute {worst_abs:.1e}, 1000 steps)")
    assert ok


def _distance(a: VMBState, b: VMBState) -> float:
    sg = a.f.sgrid
    d2 = (a.f - b.f).norm() ** 2 + sg.norm(a.em.E - b.em.E) ** 2 + sg.norm(a.em.B_tilde - b.em.B_tilde) ** 2
    return math.sqrt(d2)


def test_criterion_5_scheme_order(ws):
    data = prepare_data(RecipeConfig("macro_mode", 1e-2), ws.sgrid, ws.vgrid)
    init = vmb_initial(data, 0.5, ws.cfg.B_background, 1.0, 1.0)
    finals = []
    for dt in (0.02, 0.01, 0.005):
        sc = SolverConfig(dt=dt, t_end=1.0, gauss_ceiling=None)
        st = init
        for _ in range(sc.n_steps):
            st = step_vmb(st, ws.ops, sc)
        finals.append(st)
    ratio = _distance(finals[0], finals[1]) / _distance(finals[1], finals[2])
    bal = _records(run_property_suite(ws.cfg, ws, ["balance"]))
    # a law whose dt-dependent part vanishes reports an infinite ratio and carries no order information
    finite = {k: r.value for k, r in bal.items() if math.isfinite(r.value)}
    ok = 3.5 <= ratio <= 4.5 and bool(finite) and all(3.5 <= v <= 4.5 for v in finite.values())
    detail = ", ".join(f"{k.removeprefix('balance_')} {v:.2f}" for k, v in finite.items())
    report(5, ok, f"Strang ratio {ratio:.3f}; balance difference ratios {detail}")
    assert ok


def test_criterion_6_energy_bound(ws):
    cfg = ws.cfg
    data = prepare_data(cfg.recipe, ws.sgrid, ws.vgrid)
    sc = SolverConfig(dt=0.05, t_end=10.0)
    t0 = time.perf_counter()
    worst = {}
    for eps in (0.2, 0.1, 0.05, 0.025):
        init = vmb_initial(data, eps, cfg.B_background, eps, eps)
        traj = run(init, ws.ops, sc, recorder=lambda s: {"E3": energy_functional(s, 3)})
        series = [r["E3"] for r in traj.rows]
        worst[eps] = max(series) / series[0]
    wall = time.perf_counter() - t0
    ok = all(v <= 10.0 for v in worst.values()) and wall <= 600.0
    detail = ", ".join(f"eps {e}: {v:.3f}" for e, v in worst.items())
    report(6, ok, f"max E3(t)/E3(0) {detail}; {wall:.0f} s")
    assert ok


def test_criterion_7_epsilon_sweep(ws):
    cfg = default_cfg(solver={"dt": 0.05, "t_end": 2.0})
    w = Workspace(cfg, ws.sgrid, ws.vgrid, ws.model, ws.linop, ws.ops, cfg.solver_config())
    t0 = time.perf_counter()
    rep = run_epsilon_sweep(cfg, w)
    wall = time.perf_counter() - t0
    lo, hi = 0.8 * S_STAR, 1.2 * S_STAR
    ok = lo <= rep.slope <= hi and rep.residual <= 0.05 and wall <= 900.0
    report(7, ok, f"slope {rep.slope:.4f} in [{lo}, {hi}], residual {rep.residual:.2e}, {wall:.0f} s")
    assert ok


def test_criterion_8_expansion_remainder(ws):
    cfg = default_cfg(solver={"dt": 0.05, "t_end": 2.0}, expansion_order=1)
    w = Workspace(cfg, ws.sgrid, ws.vgrid, ws.model, ws.linop, ws.ops, cfg.solver_config())
    rep = run_expansion_check(cfg, w)
    # degeneration: ε = 1, zero background, empty leader
    sg, vg = ws.sgrid, ws.vgrid
    data = prepare_data(RecipeConfig("macro_mode", 1e-2), sg, vg)
    f = data.base + data.gap_f
    E0 = poisson_field(charge_density(f), sg)
    zero3 = np.zeros((3,) + sg.shape)
    direct = VMBState(f, EMState(E0, zero3, np.zeros(3), 1.0))
    casc = CascadeState(PairDistribution.zeros(sg, vg), [], f.copy(), E0.copy(), zero3.copy(), np.zeros(3), [], 1.0, 1)
    sc = SolverConfig(dt=0.05, t_end=0.15, gauss_ceiling=None)
    for _ in range(sc.n_steps):
        direct = step_vmb(direct, ws.ops, sc)
        casc = step_cascade(casc, ws.ops, sc)
    degen = max(float(np.abs(direct.f.plus - casc.f_m.plus).max()), float(np.abs(direct.f.minus - casc.f_m.minus).max()),
                float(np.abs(direct.em.E - casc.E_m).max()), float(np.abs(direct.em.B_tilde - casc.B_m).max()))
    ok = 1.7 <= rep.slope <= 2.3 and degen <= 1e-12
    report(8, ok, f"remainder slope {rep.slope:.4f} in [1.7, 2.3], degeneration max diff {degen:.1e}")
    assert ok


def test_criterion_9_determinism_and_resume(ws, tmp_path):
    cfg = default_cfg(solver={"dt": 0.05, "t_end": 0.3, "checkpoint_every": 2})
    w = Workspace(cfg, ws.sgrid, ws.vgrid, ws.model, ws.linop, ws.ops, cfg.solver_config())
    a, b, part = tmp_path / "a", tmp_path / "b", tmp_path / "part"
    simulate(cfg, a, w)
    simulate(cfg, b, w)
    simulate(cfg, part, w)
    (part / "state_6.ckpt").unlink()
    simulate(cfg, part, w, resume=True)
    names = ("series.csv", "macro.csv", "state_6.ckpt")
    repeat = all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    resume = all((a / n).read_bytes() == (part / n).read_bytes() for n in names)
    ok = repeat and resume
    report(9, ok, f"repeat bitwise {repeat}, resume bitwise {resume}")
    assert ok
