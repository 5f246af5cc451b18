"""Run configuration, initial-data recipes, ε-sweeps, the expansion check, rate fits,
the property suite and output files.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import _accel
from .collision_kernel import (
    KernelError,
    KernelModel,
    LinearizedOperator,
    boltzmann_q,
    build_linearized,
    coercivity,
    gamma_bilinear,
    null_space_residuals,
)
from .em_fields import (
    EMState,
    charge_density,
    enforce_compatibility,
    gauss_residual,
    maxwell_substep,
    mode_propagator,
)
from .energy_diagnostics import (
    DiagnosticsConfig,
    WeightSpec,
    WeightedNormSpec,
    default_weighted,
    energy_functional,
    lambda_power,
    make_recorder,
    weighted_norm,
)
from .kinetic_solver import (
    CascadeState,
    SolverConfig,
    SolverError,
    SolverOps,
    VMBState,
    VPBState,
    run,
    step_cascade,
    step_vmb,
    step_vpb,
    vmb_force,
)
from .macro_micro import macro_coefficients, macro_residuals, micro_part, project_P, verify_micro_identity
from .phase_grid import PairDistribution, SpatialGrid, VelocityGrid

log = logging.getLogger(__name__)

RECIPES = ("charge_mode", "macro_mode", "transverse_pulse", "random")
SYSTEMS = ("vmb", "vpb", "cascade")
AMPLITUDE_GUARD = 0.1


class ConfigError(ValueError):
    pass


class EpsilonRunError(SolverError):
    """A solver failure inside a sweep, tagged with the offending ε."""

    def __init__(self, epsilon: float, cause: Exception):
        super().__init__(f"epsilon={epsilon}: {type(cause).__name__}: {cause}")
        self.epsilon = epsilon
        self.cause = cause


# ---------------------------------------------------------------- configuration


@dataclass
class RecipeConfig:
    """Named initial-data family.

    The ε-dependent VMB data add ε^eta·(gap) to the limit data: a charge-free momentum
    mode in f and a transverse (E, B̃) pulse, both of relative size `gap`.
    """

    name: str = "macro_mode"
    amplitude: float = 1e-3
    mode: int = 1
    eta: float = 1.0
    gap: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.name not in RECIPES:
            raise ConfigError(f"recipe must be one of {RECIPES}, got {self.name!r}")
        if not 0.0 <= self.amplitude <= AMPLITUDE_GUARD:
            raise ConfigError(f"amplitude {self.amplitude} outside the small-data guard [0, {AMPLITUDE_GUARD}]")
        if self.mode < 1:
            raise ConfigError("mode must be a positive integer")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")


@dataclass
class RunConfig:
    """Everything a run needs; see README for the key list."""

    dim: int = 1
    lengths: tuple[float, ...] = (2.0 * math.pi,)
    n_x: tuple[int, ...] = (32,)
    v_max: float = 6.0
    n_v: int = 16
    kernel: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    system: str = "vmb"
    epsilon: float = 0.1
    epsilons: tuple[float, ...] = (0.2, 0.1, 0.05, 0.025)
    B_background: tuple[float, float, float] = (1.0, 0.0, 0.0)
    B_levels: tuple[tuple[float, float, float], ...] = ()
    expansion_order: int = 1
    recipe: RecipeConfig = field(default_factory=RecipeConfig)
    diagnostics: dict = field(default_factory=dict)
    record_diagnostics: bool = True
    error_order: int = 3
    expected_slope: tuple[float, float] | None = None
    checks: tuple[str, ...] | None = None
    seed: int = 0
    cache_dir: str | None = None
    out_dir: str = "out"

    # ------------------------------------------------------------ build

    def validate(self) -> None:
        try:
            self.spatial_grid()
            self.velocity_grid()
            self.kernel_model()
            self.solver_config()
            self.diagnostics_config()
        except (ValueError, TypeError, KernelError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        self.recipe.validate()
        if self.system not in SYSTEMS:
            raise ConfigError(f"system must be one of {SYSTEMS}")
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in (0, 1]")
        eps = list(self.epsilons)
        if not eps or any(not 0.0 < e <= 1.0 for e in eps):
            raise ConfigError("every epsilon must lie in (0, 1]")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("epsilons must be strictly decreasing")
        if self.expansion_order < 1:
            raise ConfigError("expansion_order must be >= 1")
        if len(self.B_levels) not in (0, self.expansion_order - 1):
            raise ConfigError("B_levels needs expansion_order - 1 entries")
        if len(self.B_background) != 3:
            raise ConfigError("B_background needs three components")
        if not 0 <= self.error_order <= 3:
            raise ConfigError("error_order must lie in [0, 3]")
        if self.expected_slope is not None and len(self.expected_slope) != 2:
            raise ConfigError("expected_slope is a [low, high] pair")

    def spatial_grid(self) -> SpatialGrid:
        return SpatialGrid(self.dim, tuple(self.lengths), tuple(self.n_x))

    def velocity_grid(self) -> VelocityGrid:
        return VelocityGrid(self.v_max, self.n_v)

    def kernel_model(self) -> KernelModel:
        return KernelModel.from_dict(self.kernel) if self.kernel else KernelModel()

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver)

    def diagnostics_config(self) -> DiagnosticsConfig:
        d = dict(self.diagnostics)
        weighted = d.pop("weighted", None)
        if weighted is None:
            specs = default_weighted(self.dim)
        else:
            specs = tuple(
                WeightedNormSpec(WeightSpec(**w.get("weight", {})), tuple(w.get("alpha", (0,) * self.dim)),
                                 tuple(w.get("beta", (0, 0, 0))), w.get("variant", "plain"))
                for w in weighted
            )
        if "varrhos" in d:
            d["varrhos"] = tuple(float(r) for r in d["varrhos"])
        return DiagnosticsConfig(weighted=specs, **d)

    # ------------------------------------------------------------ io

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        rec = d.pop("recipe", {}) or {}
        if not isinstance(rec, dict):
            raise ConfigError("recipe must be a mapping")
        try:
            recipe = RecipeConfig(**rec)
        except TypeError as exc:
            raise ConfigError(f"bad recipe: {exc}") from exc
        for key in ("lengths", "n_x", "epsilons", "B_background"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        if "B_levels" in d:
            d["B_levels"] = tuple(tuple(b) for b in d["B_levels"])
        if d.get("expected_slope") is not None:
            d["expected_slope"] = tuple(d["expected_slope"])
        if d.get("checks") is not None:
            d["checks"] = tuple(d["checks"])
        try:
            cfg = cls(recipe=recipe, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, val in list(d.items()):
            if isinstance(val, tuple):
                d[key] = [list(x) if isinstance(x, tuple) else x for x in val]
        return d


# ---------------------------------------------------------------- workspace


@dataclass
class Workspace:
    cfg: RunConfig
    sgrid: SpatialGrid
    vgrid: VelocityGrid
    model: KernelModel
    linop: LinearizedOperator
    ops: SolverOps
    solver: SolverConfig

    @classmethod
    def build(cls, cfg: RunConfig) -> "Workspace":
        cfg.validate()
        sg, vg, model = cfg.spatial_grid(), cfg.velocity_grid(), cfg.kernel_model()
        linop = build_linearized(vg, model, cache_dir=cfg.cache_dir)
        return cls(cfg, sg, vg, model, linop, SolverOps(sg, vg, linop), cfg.solver_config())


# ---------------------------------------------------------------- initial data


@dataclass
class PreparedData:
    """Limit data plus the ε-independent gap profiles."""

    base: PairDistribution
    gap_f: PairDistribution
    gap_E: np.ndarray
    gap_B: np.ndarray


def prepare_data(recipe: RecipeConfig, sg: SpatialGrid, vg: VelocityGrid) -> PreparedData:
    """Base data isotropic in (v₂, v₃) with charge and current along x₁; gap profiles of the same size."""
    A = recipe.amplitude
    k = 2.0 * math.pi * recipe.mode / sg.lengths[0]
    x = sg.mesh()[0]
    ex = (Ellipsis,) + (None,) * 3
    sm = vg.sqrt_mu
    v = vg.nodes
    cos, sin = np.cos(k * x)[ex], np.sin(k * x)[ex]
    zero_f = np.zeros(sg.shape + vg.shape)
    if recipe.name == "charge_mode":
        plus = A * cos * sm
        minus = -plus
    elif recipe.name == "macro_mode":
        plus = A * (cos * sm + 0.5 * sin * v[..., 0] * sm + 0.25 * cos * (vg.speed2 - 3.0) * sm)
        minus = A * (-cos * sm + 0.5 * sin * v[..., 0] * sm + 0.25 * cos * (vg.speed2 - 3.0) * sm)
    elif recipe.name == "transverse_pulse":
        plus = zero_f.copy()
        minus = zero_f.copy()
    else:
        rng = np.random.default_rng(recipe.seed)
        plus = zero_f.copy()
        minus = zero_f.copy()
        radial = [sm, v[..., 0] * sm, (vg.speed2 - 3.0) * sm, v[..., 0] ** 2 * sm]
        for mode in range(1, 4):
            kk = 2.0 * math.pi * mode / sg.lengths[0]
            for r in radial:
                cp, sp, cm, smn = rng.normal(size=4) / mode**2
                plus = plus + A * (cp * np.cos(kk * x)[ex] + sp * np.sin(kk * x)[ex]) * r
                minus = minus + A * (cm * np.cos(kk * x)[ex] + smn * np.sin(kk * x)[ex]) * r
    base = PairDistribution(plus, minus, sg, vg)
    g = A * recipe.gap
    gp = g * cos * v[..., 0] * sm
    gap_f = PairDistribution(gp, gp.copy(), sg, vg)
    gap_E = np.zeros((3,) + sg.shape)
    gap_B = np.zeros((3,) + sg.shape)
    xs = sg.mesh()[0]
    gap_E[1] = g * np.sin(k * xs)
    gap_B[2] = g * np.cos(k * xs)
    if recipe.name == "transverse_pulse":
        gap_f = gap_f * 0.0
    return PreparedData(base, gap_f, gap_E, gap_B)


def vmb_initial(data: PreparedData, eps: float, B_background, f_scale: float, field_scale: float) -> VMBState:
    """Total VMB data: base + f_scale·gap_f, fields from Poisson plus field_scale·transverse gap."""
    f = data.base + data.gap_f * f_scale
    E, B = enforce_compatibility(f, data.gap_E * field_scale, data.gap_B * field_scale)
    return VMBState(f, EMState(E, B, np.asarray(B_background, dtype=float), eps))


def vpb_initial(data: PreparedData, B_eff=(0.0, 0.0, 0.0), eps: float = 1.0) -> VPBState:
    return VPBState(data.base.copy(), np.asarray(B_eff, dtype=float), eps)


def cascade_initial(data: PreparedData, eps: float, m: int, B_P, B_levels=()) -> CascadeState:
    """Split the expansion-check data: f gap at order ε, transverse fields at order ε^m."""
    sg = data.base.sgrid
    zero = data.base * 0.0
    levels = [zero.copy() for _ in range(m - 1)]
    if m == 1:
        f_m = data.gap_f.copy()
    else:
        levels[0] = data.gap_f.copy()
        f_m = zero.copy()
    E_m, B_m = enforce_compatibility(f_m, data.gap_E, data.gap_B)
    Bl = [np.asarray(b, dtype=float) for b in B_levels] or [np.zeros(3) for _ in range(m - 1)]
    del sg
    return CascadeState(data.base.copy(), levels, f_m, E_m, B_m, np.asarray(B_P, dtype=float), Bl, eps, m)


# ---------------------------------------------------------------- error functionals


def difference_error(f_a: PairDistribution, E_a: np.ndarray, B_a: np.ndarray,
                     f_b: PairDistribution, E_b: np.ndarray, B_b: np.ndarray, order: int) -> float:
    """Σ_{|α|+|β|≤N}‖∂^α_β(f_a − f_b)‖² + ‖E_a − E_b‖²_{H^N} + ‖B_a − B_b‖²_{H^N}."""
    from types import SimpleNamespace

    diff = SimpleNamespace(f=f_a - f_b, em=EMState(E_a - E_b, B_a - B_b))
    return energy_functional(diff, order)


def fit_rate(errors: Sequence[float], eps: Sequence[float]) -> tuple[float, float, float]:
    """Least squares of log(error) on log(ε): (slope, intercept, RMS residual in log space)."""
    errors = [float(e) for e in errors]
    eps = [float(e) for e in eps]
    if len(errors) != len(eps):
        raise ValueError("errors and eps must have the same length")
    if len(eps) < 3:
        raise ValueError("need at least three points")
    if any(not e > 0 for e in errors) or any(not e > 0 for e in eps):
        raise ValueError("errors and eps must be positive")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps must be strictly decreasing")
    x, y = np.log(eps), np.log(errors)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid**2)))


@dataclass
class RateReport:
    epsilons: list[float]
    errors: list[float]
    slope: float | None
    intercept: float | None
    residual: float | None
    eta: float
    error_order: int
    metadata: dict = field(default_factory=dict)
    error_series: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RemainderReport(RateReport):
    expansion_order: int = 1
    reassembly_defects: list[float] = field(default_factory=list)


def _run_meta(ws: Workspace) -> dict:
    s = ws.solver
    return {
        "dt": s.dt,
        "t_end": s.t_end,
        "n_steps": s.n_steps,
        "splitting": s.splitting,
        "collision_mode": s.collision_mode,
        "record_every": s.record_every,
        "grid": ws.sgrid.to_dict(),
        "velocity": ws.vgrid.to_dict(),
        "kernel": ws.model.to_dict(),
        "operator_key": ws.linop.key,
        "backend": _accel.backend_name(),
    }


def force_cfl_bound(ws: Workspace, eps: float, B_background, E_max: float = 0.0) -> float:
    """Largest dt allowed by the force substep for a field of size E_max."""
    vmax = float(np.max(np.abs(ws.vgrid.axis)))
    bn = float(np.linalg.norm(B_background))
    speed = E_max + eps * bn * vmax * math.sqrt(2.0)
    return math.inf if speed == 0 else ws.solver.cfl * ws.vgrid.dv / speed


def run_epsilon_sweep(cfg: RunConfig, ws: Workspace | None = None, progress: Callable | None = None) -> RateReport:
    """VPB limit once, VMB per ε, sup-in-time squared error, slope of log error against log ε."""
    ws = ws or Workspace.build(cfg)
    sc = ws.solver
    data = prepare_data(cfg.recipe, ws.sgrid, ws.vgrid)
    ref_rows: list[tuple[float, PairDistribution, np.ndarray]] = []

    def rec_ref(state: VPBState):
        ref_rows.append((state.t, state.f.copy(), state.E))
        return {"t": state.t}

    run(vpb_initial(data), ws.ops, sc, recorder=rec_ref)
    errors, series, timing = [], {}, {}
    Bzero = np.zeros((3,) + ws.sgrid.shape)
    for eps in cfg.epsilons:
        t0 = time.perf_counter()
        scale = eps**cfg.recipe.eta
        init = vmb_initial(data, eps, cfg.B_background, scale, scale)
        idx = iter(range(len(ref_rows)))

        def rec(state: VMBState, idx=idx):
            i = next(idx)
            _, f_ref, E_ref = ref_rows[i]
            return {"t": state.t, "error": difference_error(state.f, state.em.E, state.em.B_tilde, f_ref, E_ref,
                                                            Bzero, cfg.error_order)}

        try:
            traj = run(init, ws.ops, sc, recorder=rec)
        except SolverError as exc:
            raise EpsilonRunError(eps, exc) from exc
        errs = [r["error"] for r in traj.rows]
        series[repr(eps)] = errs
        errors.append(max(errs))
        timing[repr(eps)] = time.perf_counter() - t0
        if progress:
            progress(eps, errors[-1])
    meta = _run_meta(ws)
    meta["recipe"] = asdict(cfg.recipe)
    meta["B_background"] = list(cfg.B_background)
    meta["cfl_bounds"] = {repr(e): force_cfl_bound(ws, e, cfg.B_background) for e in cfg.epsilons}
    meta["wall_seconds"] = timing
    if len(cfg.epsilons) >= 3 and all(e > 0 for e in errors):
        slope, icpt, res = fit_rate(errors, cfg.epsilons)
    else:
        slope = icpt = res = None
    return RateReport(list(cfg.epsilons), errors, slope, icpt, res, cfg.recipe.eta, cfg.error_order, meta, series)


def run_expansion_check(cfg: RunConfig, ws: Workspace | None = None, progress: Callable | None = None) -> RemainderReport:
    """Cascade against direct VMB per ε: squared distance of the direct solution from the leader."""
    ws = ws or Workspace.build(cfg)
    sc = ws.solver
    m = cfg.expansion_order
    data = prepare_data(cfg.recipe, ws.sgrid, ws.vgrid)
    B_P = np.asarray(cfg.B_background, dtype=float)
    errors, defects, series, timing = [], [], {}, {}
    for eps in cfg.epsilons:
        t0 = time.perf_counter()
        casc = cascade_initial(data, eps, m, B_P, cfg.B_levels)
        f_tot, em_tot = casc.reassemble()
        direct = VMBState(f_tot, em_tot)
        errs, defs = [], []

        def measure(d: VMBState, c: CascadeState) -> None:
            B_lead = np.zeros_like(d.em.B_tilde)
            Bshift = (np.asarray(d.em.B_background) - B_P).reshape((3,) + (1,) * ws.sgrid.dim)
            errs.append(difference_error(d.f, d.em.E, d.em.B_tilde + Bshift, c.f_P, c.E_P, B_lead, cfg.error_order))
            fr, emr = c.reassemble()
            defs.append(difference_error(d.f, d.em.E, d.em.B_tilde, fr, emr.E, emr.B_tilde, 0))

        measure(direct, casc)
        try:
            for k in range(sc.n_steps):
                direct = step_vmb(direct, ws.ops, sc)
                casc = step_cascade(casc, ws.ops, sc)
                if (k + 1) % sc.record_every == 0:
                    measure(direct, casc)
        except SolverError as exc:
            raise EpsilonRunError(eps, exc) from exc
        series[repr(eps)] = errs
        errors.append(max(errs))
        defects.append(max(defs))
        timing[repr(eps)] = time.perf_counter() - t0
        if progress:
            progress(eps, errors[-1])
    meta = _run_meta(ws)
    meta["recipe"] = asdict(cfg.recipe)
    meta["wall_seconds"] = timing
    if len(cfg.epsilons) >= 3 and all(e > 0 for e in errors):
        slope, icpt, res = fit_rate(errors, cfg.epsilons)
    else:
        slope = icpt = res = None
    return RemainderReport(list(cfg.epsilons), errors, slope, icpt, res, 1.0, cfg.error_order, meta, series,
                           expansion_order=m, reassembly_defects=defects)


# ---------------------------------------------------------------- property suite


@dataclass
class CheckRecord:
    name: str
    passed: bool
    value: float | None
    threshold: float | None
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PropertyReport:
    records: list[CheckRecord] = field(default_factory=list)
    sigma0: float | None = None

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "sigma0": self.sigma0, "records": [r.to_dict() for r in self.records]}


def _rel(a: float, b: float) -> float:
    return float(a) / max(float(b), 1e-300)


def _random_pair(rng, sg: SpatialGrid, vg: VelocityGrid, smooth: bool = True) -> PairDistribution:
    shape = sg.shape + vg.shape
    decay = vg.sqrt_mu if smooth else 1.0
    return PairDistribution(rng.normal(size=shape) * decay, rng.normal(size=shape) * decay, sg, vg)


class _Suite:
    """Checks of the property suite; each method returns a list of records."""

    def __init__(self, ws: Workspace, seed: int):
        self.ws = ws
        self.rng = np.random.default_rng(seed)
        self.coerc = None

    def projection(self) -> list[CheckRecord]:
        ws = self.ws
        f = _random_pair(self.rng, ws.sgrid, ws.vgrid)
        g = _random_pair(self.rng, ws.sgrid, ws.vgrid)
        Pf = project_P(f)
        idem = _rel((project_P(Pf) - Pf).norm(), Pf.norm())
        adj = abs(project_P(f).inner(g) - f.inner(project_P(g))) / (f.norm() * g.norm())
        pyth = abs(f.norm() ** 2 - Pf.norm() ** 2 - micro_part(f).norm() ** 2) / f.norm() ** 2
        return [CheckRecord("projection_idempotency", idem <= 1e-10, idem, 1e-10),
                CheckRecord("projection_self_adjoint", adj <= 1e-10, adj, 1e-10),
                CheckRecord("projection_pythagoras", pyth <= 1e-10, pyth, 1e-10)]

    def operator(self) -> list[CheckRecord]:
        op = self.ws.linop
        ns = float(np.max(null_space_residuals(op)))
        self.coerc = coercivity(op, n_random=1000, seed=int(self.rng.integers(2**31)))
        s0 = self.coerc.sigma0
        return [CheckRecord("L_symmetry", op.asymmetry <= 1e-10, op.asymmetry, 1e-10),
                CheckRecord("L_null_space", ns <= 1e-6, ns, 1e-6),
                CheckRecord("L_coercivity", s0 >= 1e-3, s0, 1e-3,
                            f"sigma0_sum={self.coerc.sigma0_sum:.4g} sigma0_diff={self.coerc.sigma0_diff:.4g}")]

    def grad_bound(self) -> list[CheckRecord]:
        bad = self.ws.model.grad_bound_violations()
        return [CheckRecord("grad_bound", bad == 0, float(bad), 0.0, "sphere nodes violating 0 <= b(c) <= C|c|")]

    def q_conservation(self) -> list[CheckRecord]:
        ws = self.ws
        vg = ws.vgrid
        mu = vg.mu
        n = 4
        F = mu * (1.0 + 0.3 * self.rng.uniform(-1, 1, size=(n,) + vg.shape))
        Q = boltzmann_q(F, F, vg, ws.model)
        v = vg.nodes
        cell = vg.cell

        def rel(weight):
            return float(np.max(np.abs(np.sum(Q * weight, axis=(-3, -2, -1))) * cell
                                / np.max(np.abs(np.sum(np.abs(Q) * np.abs(weight), axis=(-3, -2, -1))) * cell)))

        mass = rel(np.ones(vg.shape))
        mom = max(rel(v[..., i]) for i in range(3))
        en = rel(vg.speed2)
        Qmu = boltzmann_q(mu, mu, vg, ws.model)
        from .collision_kernel import collision_frequency

        nu = collision_frequency(v, ws.model)
        eq = float(np.linalg.norm(Qmu) / np.linalg.norm(nu * mu))
        return [CheckRecord("Q_mass", mass <= 1e-8, mass, 1e-8),
                CheckRecord("Q_momentum", mom <= 1e-6, mom, 1e-6),
                CheckRecord("Q_energy", en <= 1e-6, en, 1e-6),
                CheckRecord("Q_equilibrium", eq <= 1e-6, eq, 1e-6)]

    def gamma(self) -> list[CheckRecord]:
        ws = self.ws
        sg = SpatialGrid(1, (ws.sgrid.lengths[0],), (4,))
        g = _random_pair(self.rng, sg, ws.vgrid)
        h = _random_pair(self.rng, sg, ws.vgrid)
        k = _random_pair(self.rng, sg, ws.vgrid)
        a, b = 0.7, -1.3
        G_gh = gamma_bilinear(g, h, ws.model)
        lhs = gamma_bilinear(g * a + k * b, h, ws.model)
        rhs = G_gh * a + gamma_bilinear(k, h, ws.model) * b
        lin = _rel((lhs - rhs).norm(), rhs.norm())
        # only the symmetrized form conserves momentum and energy; each ordering conserves mass
        G = G_gh + gamma_bilinear(h, g, ws.model)
        cons = _rel(project_P(G).norm(), G.norm())
        return [CheckRecord("Gamma_bilinearity", lin <= 1e-10, lin, 1e-10),
                CheckRecord("Gamma_conservation", cons <= 1e-6, cons, 1e-6, "‖P(Γ(g,h)+Γ(h,g))‖/‖Γ(g,h)+Γ(h,g)‖")]

    def maxwell(self) -> list[CheckRecord]:
        sg = self.ws.sgrid
        out = []
        worst_drift, worst_mod = 0.0, 0.0
        for eps in (1.0, 0.1, 0.01):
            E = self.rng.normal(size=(3,) + sg.shape)
            B = self.rng.normal(size=(3,) + sg.shape)
            from .em_fields import longitudinal_part

            B = B - longitudinal_part(B, sg)
            E = E - longitudinal_part(E, sg)
            em = EMState(E, B, np.zeros(3), eps)
            e0 = em.energy(sg)
            for _ in range(10):
                new = maxwell_substep(em, None, 0.05, sg)
                worst_drift = max(worst_drift, abs(new.energy(sg) - em.energy(sg)) / e0)
                em = new
            for kk in (0.5, 3.0, 40.0):
                M = mode_propagator(np.array([kk, 0.0, 0.0]), eps, 0.05)
                worst_mod = max(worst_mod, float(np.max(np.abs(np.abs(np.linalg.eigvals(M)) - 1.0))))
        out.append(CheckRecord("maxwell_energy_drift", worst_drift <= 1e-12, worst_drift, 1e-12, "per step"))
        out.append(CheckRecord("maxwell_modulus", worst_mod <= 1e-14, worst_mod, 1e-14))
        return out

    def gauss(self) -> list[CheckRecord]:
        ws = self.ws
        cfg = ws.cfg
        data = prepare_data(RecipeConfig("macro_mode", 1e-3), ws.sgrid, ws.vgrid)
        st = vmb_initial(data, 0.5, cfg.B_background, 1.0, 1.0)
        sc = SolverConfig(dt=0.05, t_end=1.0, gauss_ceiling=None)
        worst = 0.0
        for _ in range(sc.n_steps):
            st = step_vmb(st, ws.ops, sc)
            worst = max(worst, gauss_residual(st.em, charge_density(st.f), ws.sgrid))
        return [CheckRecord("gauss_transport", worst <= 1e-8, worst, 1e-8, f"{sc.n_steps} steps")]

    def micro_identity(self) -> list[CheckRecord]:
        ws = self.ws
        f = _random_pair(self.rng, ws.sgrid, ws.vgrid)
        E = self.rng.normal(size=(3,) + ws.sgrid.shape)
        d = verify_micro_identity(f, E, self.rng.normal(size=3), 0.3)
        return [CheckRecord("micro_identity", d <= 1e-10, d, 1e-10)]

    def balance(self) -> list[CheckRecord]:
        """Moment-law residuals centred at a fixed time; the dt-dependent part must shrink at second order.

        Residuals carry a lattice floor that does not depend on dt, so the rate is read
        from successive differences r(dt) − r(dt/2) rather than from r itself.
        """
        ws = self.ws
        from .collision_kernel import apply_L

        data = prepare_data(RecipeConfig("macro_mode", 1e-2), ws.sgrid, ws.vgrid)
        init = vmb_initial(data, 0.5, ws.cfg.B_background, 1.0, 1.0)
        t_c = 0.2
        res = []
        for dt in (0.04, 0.02, 0.01):
            sc = SolverConfig(dt=dt, t_end=t_c + dt, gauss_ceiling=None)
            st = init
            snaps = {}
            for k in range(sc.n_steps):
                st = step_vmb(st, ws.ops, sc)
                snaps[k + 1] = st
            n_c = int(round(t_c / dt))
            r = macro_residuals(snaps[n_c - 1], snaps[n_c + 1], 2.0 * dt,
                                apply_L=lambda g: apply_L(g, ws.linop), force=vmb_force(ws.ops))
            res.append(r.residuals)
        out = []
        for name in res[0]:
            d1 = abs(res[0][name] - res[1][name])
            d2 = abs(res[1][name] - res[2][name])
            scale = max(res[0][name], 1e-300)
            if d1 <= 1e-12 * scale:
                ratio, ok = math.inf, True
            else:
                ratio = d1 / max(d2, 1e-300)
                ok = ratio >= 3.0
            out.append(CheckRecord(f"balance_{name}", ok, ratio, 3.0,
                                   f"difference ratio under dt halving; finest residual {res[2][name]:.3e}"))
        return out

    def weights(self) -> list[CheckRecord]:
        ws = self.ws
        f = _random_pair(self.rng, ws.sgrid, ws.vgrid)
        spec = WeightSpec()
        a = (0,) * ws.sgrid.dim
        w0 = weighted_norm(f, spec, 0.0, a, (0, 0, 0))
        w1 = weighted_norm(f, spec, 1.0, a, (0, 0, 0))
        plain = WeightSpec(ell=0.0, q=0.0)
        red = abs(weighted_norm(f, plain, 0.0, a, (0, 0, 0)) - f.norm()) / f.norm()
        return [CheckRecord("weight_monotone", w1 <= w0, w1 - w0, 0.0),
                CheckRecord("weight_reduces_to_plain", red <= 1e-14, red, 1e-14)]

    def sobolev(self) -> list[CheckRecord]:
        sg = self.ws.sgrid
        g = self.rng.normal(size=sg.shape)
        g = g - g.mean()
        back = lambda_power(lambda_power(g, sg, -1.0), sg, 1.0)
        err = _rel(sg.norm(back - g), sg.norm(g))
        return [CheckRecord("lambda_inversion", err <= 1e-12, err, 1e-12)]


CHECK_GROUPS: dict[str, str] = {
    "projection": "projection",
    "operator": "operator",
    "grad_bound": "grad_bound",
    "q_conservation": "q_conservation",
    "gamma": "gamma",
    "maxwell": "maxwell",
    "gauss": "gauss",
    "micro_identity": "micro_identity",
    "balance": "balance",
    "weights": "weights",
    "sobolev": "sobolev",
}


def run_property_suite(cfg: RunConfig, ws: Workspace | None = None, checks: Sequence[str] | None = None) -> PropertyReport:
    """Run the selected check groups; a failing or crashing group becomes a failed record."""
    selected = cfg.checks if checks is None else tuple(checks)
    if selected is None:
        selected = tuple(CHECK_GROUPS)
    unknown = [c for c in selected if c not in CHECK_GROUPS]
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; known: {sorted(CHECK_GROUPS)}")
    report = PropertyReport()
    if not selected:
        return report
    needs_operator = any(c in ("operator", "gauss", "balance") for c in selected)
    if ws is None:
        if needs_operator:
            ws = Workspace.build(cfg)
        else:
            cfg.validate()
            sg, vg = cfg.spatial_grid(), cfg.velocity_grid()
            ws = Workspace(cfg, sg, vg, cfg.kernel_model(), None, SolverOps(sg, vg, None), cfg.solver_config())
    suite = _Suite(ws, cfg.seed)
    for name in selected:
        try:
            report.records.extend(getattr(suite, CHECK_GROUPS[name])())
        except Exception as exc:  # a crashing check is a failed check
            report.records.append(CheckRecord(name, False, None, None, f"{type(exc).__name__}: {exc}"))
    if suite.coerc is not None:
        report.sigma0 = suite.coerc.sigma0
    return report


# ---------------------------------------------------------------- output


def write_series_csv(path: str | os.PathLike, rows: list[dict], columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(r[c])) for c in cols])
    return path


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def write_json(path: str | os.PathLike, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def split_timing(report: RateReport) -> tuple[dict, dict]:
    """(deterministic report dict, wall-clock timing) so reruns compare bitwise."""
    d = report.to_dict()
    timing = d["metadata"].pop("wall_seconds", {})
    return d, timing


def simulate(cfg: RunConfig, out_dir: str | os.PathLike, ws: Workspace | None = None, resume: bool = False):
    """Run the configured system, writing series.csv, checkpoints and the final macro state."""
    from .checkpoint import checkpoint_writer, latest_checkpoint, load_state

    ws = ws or Workspace.build(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg.recipe, ws.sgrid, ws.vgrid)
    eps = cfg.epsilon
    if cfg.system == "vmb":
        init = vmb_initial(data, eps, cfg.B_background, eps**cfg.recipe.eta, eps**cfg.recipe.eta)
    elif cfg.system == "vpb":
        init = vpb_initial(data, cfg.B_background, eps)
    else:
        init = cascade_initial(data, eps, cfg.expansion_order, cfg.B_background, cfg.B_levels)
    start = 0
    rows_before: list[dict] = []
    if resume:
        ck = latest_checkpoint(out)
        if ck is not None:
            init = load_state(ck)
            start = init.step
            rows_before = _read_rows(out / "series.csv", init.t)
    dcfg = ws.cfg.diagnostics_config()
    base_rec = make_recorder(ws.linop.nu, dcfg) if cfg.record_diagnostics else (lambda s: {"t": s.t})
    columns = dcfg.columns() if cfg.record_diagnostics else ["t"]
    series = SeriesWriter(out / "series.csv", columns, rows_before)

    def recorder(state):
        row = base_rec(state)
        series.append(row)
        return row

    try:
        traj = run(init, ws.ops, ws.solver, recorder=recorder, checkpoint=checkpoint_writer(out), start_step=start)
    finally:
        series.close()
    final = traj.final
    f = final.reassemble()[0] if isinstance(final, CascadeState) else final.f
    macro_coefficients(f).to_csv(out / "macro.csv", ws.sgrid)
    return traj


def _read_rows(path: Path, t_before: float) -> list[dict]:
    """Rows recorded strictly before t_before (the resumed state records itself again)."""
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    return [r for r in rows if r["t"] < t_before]


class SeriesWriter:
    """series.csv written row by row, so an aborted run keeps what it recorded."""

    def __init__(self, path: Path, columns: Sequence[str], initial_rows: Sequence[dict] = ()):
        self.columns = list(columns)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.columns)
        for r in initial_rows:
            self.append(r)

    def append(self, row: dict) -> None:
        self._w.writerow([repr(float(row[c])) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
