"""Time integration of the perturbative VMB system, its VPB limit and the expansion cascade.

All systems share one Strang-split step

    T(h/2) F(h/2) C(h/2) M(h) C(h/2) F(h/2) T(h/2)

with T the exact spectral free streaming, F the velocity-space force (explicit RK4
on a conservative central-difference form), C the collision step (exact matrix
exponential of the linearized operator, optionally with a Lawson midpoint update
for Γ) and M the exact per-mode Maxwell rotation. The longitudinal electric field
is advanced inside T from the exact time integral of the streaming current, which
keeps Gauss's law at round-off level.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .collision_kernel import LinearizedOperator, gamma_bilinear
from .em_fields import (
    EMState,
    charge_density,
    current_density,
    gauss_residual,
    longitudinal_part,
    maxwell_substep,
    poisson_field,
)
from .phase_grid import PairDistribution, SpatialGrid, VelocityGrid

log = logging.getLogger(__name__)

SPLITTINGS = ("strang", "lie")
COLLISION_MODES = ("linearized_only", "full_bilinear")
SOURCE_SCALINGS = ("derived", "as_displayed")


class SolverError(RuntimeError):
    pass


class CFLError(SolverError):
    def __init__(self, dt: float, bound: float, speed: float):
        super().__init__(f"force substep CFL violated: dt={dt:.4g} > bound {bound:.4g} (max |E + εv×B| = {speed:.4g})")
        self.dt = dt
        self.bound = bound
        self.speed = speed


class NumericalAbort(SolverError):
    def __init__(self, substep: int, name: str, step: int | None = None, t: float | None = None):
        where = f" at step {step}, t={t:.6g}" if step is not None else ""
        super().__init__(f"non-finite values after substep {substep} ({name}){where}")
        self.substep = substep
        self.name = name
        self.step = step
        self.t = t


class GaussCeilingError(SolverError):
    pass


class CascadeOrderError(SolverError):
    pass


@dataclass
class SolverConfig:
    dt: float = 0.05
    t_end: float = 1.0
    splitting: str = "strang"
    collision_mode: str = "linearized_only"
    stiff_collision: bool = True
    record_every: int = 1
    checkpoint_every: int = 0
    cfl: float = 1.0
    gauss_ceiling: float = 1e-6
    remainder_source_scaling: str = "derived"

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if self.t_end > 0 and self.t_end < self.dt * (1 - 1e-12):
            raise ValueError("t_end must be at least dt")
        if self.splitting not in SPLITTINGS:
            raise ValueError(f"splitting must be one of {SPLITTINGS}")
        if self.collision_mode not in COLLISION_MODES:
            raise ValueError(f"collision_mode must be one of {COLLISION_MODES}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.remainder_source_scaling not in SOURCE_SCALINGS:
            raise ValueError(f"remainder_source_scaling must be one of {SOURCE_SCALINGS}")

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.t_end / self.dt + 1e-9))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------- operators


def central_difference(n: int, h: float) -> np.ndarray:
    """Flux-form first difference: centered interior fluxes, no flux through the lattice edge.

    Equal to the centered difference away from the two edge nodes; every column sums to
    zero, so the velocity integral of D g vanishes exactly and charge is conserved.
    """
    D = (np.eye(n, k=1) - np.eye(n, k=-1)) / (2.0 * h)
    D[0, 0] = 1.0 / (2.0 * h)
    D[-1, -1] = -1.0 / (2.0 * h)
    D.setflags(write=False)
    return D


class SolverOps:
    """Grids, collision operator and per-step-size caches shared by all steppers."""

    def __init__(self, sgrid: SpatialGrid, vgrid: VelocityGrid, linop: LinearizedOperator | None):
        if linop is not None and linop.vgrid != vgrid:
            raise SolverError("collision operator built on a different lattice")
        self.sgrid = sgrid
        self.vgrid = vgrid
        self.linop = linop
        self.model = None if linop is None else linop.model
        self.D = central_difference(vgrid.n_v, vgrid.dv)
        self._phase: dict[float, np.ndarray] = {}
        self._kv_cache: np.ndarray | None = None
        v = vgrid.nodes
        self.vfield = np.moveaxis(v, -1, 0)  # (3, n, n, n)
        self.vmu = self.vfield * vgrid.sqrt_mu  # v μ^{1/2}

    # spectral streaming ------------------------------------------------

    def _kv(self) -> np.ndarray:
        """k·v for every (mode, node), shape (*S, n, n, n)."""
        if self._kv_cache is None:
            sg = self.sgrid
            k = 2.0 * np.pi * sg.xi
            ex = (slice(None),) * sg.dim + (None,) * 3
            self._kv_cache = sum(k[a][ex] * self.vfield[a] for a in range(3))
        return self._kv_cache

    def phase(self, tau: float) -> tuple[np.ndarray, np.ndarray]:
        """exp(-i k·v τ) with Nyquist modes removed, and ∫₀^τ exp(-i k·v s) ds."""
        key = float(tau)
        if key not in self._phase:
            th = self._kv() * tau
            ph = np.exp(-1j * th)
            small = np.abs(th) < 1e-6
            thsafe = np.where(small, 1.0, th)
            integ = np.where(small, tau * (1.0 - 0.5j * th - th * th / 6.0), tau * (1.0 - ph) / (1j * thsafe))
            nyq = self.sgrid.nyquist_mask[(Ellipsis,) + (None,) * 3]
            ph = np.where(nyq, 0.0, ph)
            integ = np.where(nyq, 0.0, integ)
            self._phase[key] = (ph, integ)
        return self._phase[key]

    # collision ----------------------------------------------------------

    def decay(self, tau: float):
        if self.linop is None:
            raise SolverError("no collision operator available")
        return self.linop.decay(tau)


def _finite(*arrays: np.ndarray) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


# ---------------------------------------------------------------- substeps


def transport(f: PairDistribution, tau: float, ops: SolverOps, E: np.ndarray | None = None):
    """Free streaming over τ; when E is given, its longitudinal part absorbs the streaming current.

    Returns (f_new, E_new); E_new is None when E is None.
    """
    sg = ops.sgrid
    ph, integ = ops.phase(tau)
    ax = sg.axes
    hp = np.fft.fftn(f.plus, axes=ax)
    hm = np.fft.fftn(f.minus, axes=ax)
    E_new = None
    if E is not None:
        dh = hp - hm
        vg = ops.vgrid
        jint = np.tensordot(dh * integ, ops.vmu, axes=((-3, -2, -1), (1, 2, 3))) * vg.cell  # (*S, 3)
        jint = np.moveaxis(jint, -1, 0)
        k = 2.0 * np.pi * sg.xi
        k = np.where(sg.nyquist_mask[None], 0.0, k)
        kn = np.sqrt(np.sum(k * k, axis=0))
        kh = k / np.where(kn > 0, kn, 1.0)
        Eh = np.stack([sg.forward(E[i]) for i in range(3)])
        Eh = Eh - kh * np.sum(kh * jint, axis=0)
        E_new = np.stack([sg.inverse(Eh[i]) for i in range(3)])
    hp *= ph
    hm *= ph
    fp = np.fft.ifftn(hp, axes=ax).real
    fm = np.fft.ifftn(hm, axes=ax).real
    return f.like(fp, fm), E_new


def _vgrad_dot(g: np.ndarray, drive: Sequence[np.ndarray | None], ops: SolverOps) -> np.ndarray:
    """Σ_a drive_a · D_a g, with D the central difference along velocity axis a."""
    out = None
    nd = g.ndim
    for a in range(3):
        if drive[a] is None:
            continue
        ax = nd - 3 + a
        Dg = np.moveaxis(np.tensordot(g, ops.D, axes=([ax], [1])), -1, ax)
        term = drive[a] * Dg
        out = term if out is None else out + term
    return np.zeros_like(g) if out is None else out


def _drive_field(E: np.ndarray | None, B: np.ndarray | None, eps: float, ops: SolverOps) -> list:
    """Components of E + ε v×B as phase-space fields broadcastable to (*S, n, n, n)."""
    sg = ops.sgrid
    ex = (slice(None),) * sg.dim + (None,) * 3
    v = ops.vfield
    comps: list = [None, None, None]
    if E is not None:
        for a in range(3):
            comps[a] = np.broadcast_to(E[a][ex], sg.shape + (1, 1, 1))
    if B is not None and np.any(B != 0.0):
        Bx = [np.broadcast_to(B[a], sg.shape)[ex] for a in range(3)]
        cross = (
            v[1] * Bx[2] - v[2] * Bx[1],
            v[2] * Bx[0] - v[0] * Bx[2],
            v[0] * Bx[1] - v[1] * Bx[0],
        )
        for a in range(3):
            c = eps * cross[a]
            comps[a] = c if comps[a] is None else comps[a] + c
    return comps


def max_speed(drive: list) -> float:
    m = 0.0
    tot = None
    for c in drive:
        if c is None:
            continue
        sq = np.asarray(c) ** 2
        tot = sq if tot is None else tot + sq
    if tot is not None:
        m = float(np.sqrt(np.max(tot)))
    return m


def field_force(f: PairDistribution, drive: list, ops: SolverOps) -> PairDistribution:
    """-q₀ μ^{-1/2}(E + εv×B)·∇_v(μ^{1/2} f) with the conservative central difference."""
    sm = ops.vgrid.sqrt_mu
    gp = _vgrad_dot(sm * f.plus, drive, ops) / sm
    gm = _vgrad_dot(sm * f.minus, drive, ops) / sm
    return f.like(-gp, gm)


def electric_source(E: np.ndarray, f: PairDistribution, ops: SolverOps) -> PairDistribution:
    """E·v μ^{1/2} q₁."""
    sg = ops.sgrid
    ex = (slice(None),) * sg.dim + (None,) * 3
    s = sum(E[a][ex] * ops.vmu[a] for a in range(3))
    s = np.broadcast_to(s, f.plus.shape)
    return f.like(np.array(s), -np.array(s))


def vmb_force(ops: SolverOps) -> Callable:
    """f, E, B_total, ε ↦ the discrete force right side E·vμ^{1/2}q₁ − q₀μ^{-1/2}(E + εv×B)·D(μ^{1/2}f)."""

    def force(f: PairDistribution, E: np.ndarray, Btot: np.ndarray, eps: float) -> PairDistribution:
        return field_force(f, _drive_field(E, Btot, eps, ops), ops) + electric_source(E, f, ops)

    return force


def force_step(f: PairDistribution, tau: float, ops: SolverOps, drive: list,
               source: PairDistribution | None, cfl: float, dt_check: float | None = None) -> PairDistribution:
    """RK4 for ∂_t f = source − q₀μ^{-1/2} drive·∇_v(μ^{1/2} f) with frozen drive and source."""
    speed = max_speed(drive)
    if speed > 0.0:
        bound = cfl * ops.vgrid.dv / speed
        h = tau if dt_check is None else dt_check
        if h > bound:
            raise CFLError(h, bound, speed)
    elif source is None:
        return f

    def rhs(g: PairDistribution) -> PairDistribution:
        r = field_force(g, drive, ops) if speed > 0.0 else g * 0.0
        return r if source is None else r + source

    k1 = rhs(f)
    k2 = rhs(f + k1 * (0.5 * tau))
    k3 = rhs(f + k2 * (0.5 * tau))
    k4 = rhs(f + k3 * tau)
    return f + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (tau / 6.0)


def collision_step(f: PairDistribution, tau: float, ops: SolverOps, cfg: SolverConfig,
                   gamma_rhs: Callable[[PairDistribution], PairDistribution] | None = None) -> PairDistribution:
    """∂_t f = −L f (+ Γ terms) over τ."""
    if ops.linop is None:
        return f
    use_gamma = gamma_rhs is not None and cfg.collision_mode == "full_bilinear"
    if cfg.stiff_collision:
        Es, Ed = ops.decay(tau)
        N = ops.vgrid.size

        def expo(g: PairDistribution, mats) -> PairDistribution:
            s = (g.s.reshape(-1, N) @ mats[0]).reshape(g.plus.shape)
            d = (g.d.reshape(-1, N) @ mats[1]).reshape(g.plus.shape)
            return PairDistribution.from_sum_diff(s, d, g.sgrid, g.vgrid)

        if not use_gamma:
            return expo(f, (Es, Ed))
        half = ops.decay(0.5 * tau)
        k1 = gamma_rhs(f)
        mid = expo(f + k1 * (0.5 * tau), half)
        k2 = gamma_rhs(mid)
        return expo(f, (Es, Ed)) + expo(k2, half) * tau
    # explicit Heun; only sensible for tiny τ
    from .collision_kernel import apply_L

    def rhs(g: PairDistribution) -> PairDistribution:
        r = apply_L(g, ops.linop) * -1.0
        return r + gamma_rhs(g) if use_gamma else r

    k1 = rhs(f)
    k2 = rhs(f + k1 * tau)
    return f + (k1 + k2) * (0.5 * tau)


# ---------------------------------------------------------------- VMB


@dataclass
class VMBState:
    f: PairDistribution
    em: EMState
    t: float = 0.0
    step: int = 0

    def copy(self) -> "VMBState":
        return VMBState(self.f.copy(), self.em.copy(), self.t, self.step)


def _check(name: str, index: int, *arrays, step=None, t=None) -> None:
    if not _finite(*arrays):
        raise NumericalAbort(index, name, step, t)


def _vmb_substeps(f: PairDistribution, E: np.ndarray, B: np.ndarray, eps: float, Bbg: np.ndarray, h: float,
                  ops: SolverOps, cfg: SolverConfig, *, e_scale: float = 1.0, b_scale: float = 1.0,
                  extra_source: Callable | None = None, drive_extra: Callable | None = None,
                  gamma_rhs: Callable | None = None, current_scale: float = 1.0, step=None, t=None):
    """Shared VMB-type Strang/Lie step.

    The force drive is e_scale·E + ε v×(Bbg + b_scale·B) (+ drive_extra) and the
    source is E·vμ^{1/2}q₁ (+ extra_source(E, B)). Maxwell uses current_scale·j.
    """
    em_tmp = EMState(E, B, Bbg, eps)

    def force(g, E_, B_, tau):
        Ed = e_scale * E_
        Bd = Bbg.reshape((3,) + (1,) * ops.sgrid.dim) + b_scale * B_
        if drive_extra is not None:
            Ex, Bx = drive_extra()
            if Ex is not None:
                Ed = Ed + Ex
            if Bx is not None:
                Bd = Bd + Bx
        drive = _drive_field(Ed, Bd, eps, ops)
        src = electric_source(E_, g, ops)
        if extra_source is not None:
            xs = extra_source(E_, B_)
            if xs is not None:
                src = src + xs
        return force_step(g, tau, ops, drive, src, cfg.cfl, dt_check=h)

    def maxwell(E_, B_, g, tau):
        j = current_density(g) * current_scale
        new = maxwell_substep(EMState(E_, B_, Bbg, eps), j, tau, ops.sgrid, longitudinal=False)
        return new.E, new.B_tilde

    if cfg.splitting == "lie":
        f, E = transport(f, h, ops, E)
        _check("transport", 1, f.plus, f.minus, E, step=step, t=t)
        f = force(f, E, B, h)
        _check("force", 2, f.plus, f.minus, step=step, t=t)
        f = collision_step(f, h, ops, cfg, gamma_rhs)
        _check("collision", 3, f.plus, f.minus, step=step, t=t)
        E, B = maxwell(E, B, f, h)
        _check("maxwell", 4, E, B, step=step, t=t)
        return f, E, B
    h2 = 0.5 * h
    f, E = transport(f, h2, ops, E)
    _check("transport", 1, f.plus, f.minus, E, step=step, t=t)
    f = force(f, E, B, h2)
    _check("force", 2, f.plus, f.minus, step=step, t=t)
    f = collision_step(f, h2, ops, cfg, gamma_rhs)
    _check("collision", 3, f.plus, f.minus, step=step, t=t)
    E, B = maxwell(E, B, f, h)
    _check("maxwell", 4, E, B, step=step, t=t)
    f = collision_step(f, h2, ops, cfg, gamma_rhs)
    _check("collision", 5, f.plus, f.minus, step=step, t=t)
    f = force(f, E, B, h2)
    _check("force", 6, f.plus, f.minus, step=step, t=t)
    f, E = transport(f, h2, ops, E)
    _check("transport", 7, f.plus, f.minus, E, step=step, t=t)
    del em_tmp
    return f, E, B


def _gamma_self(ops: SolverOps) -> Callable[[PairDistribution], PairDistribution]:
    return lambda g: gamma_bilinear(g, g, ops.model)


def step_vmb(state: VMBState, ops: SolverOps, cfg: SolverConfig) -> VMBState:
    """One split step of the perturbative VMB system."""
    em = state.em
    gam = _gamma_self(ops) if cfg.collision_mode == "full_bilinear" else None
    f, E, B = _vmb_substeps(state.f, em.E, em.B_tilde, em.epsilon, em.B_background, cfg.dt, ops, cfg,
                            gamma_rhs=gam, step=state.step, t=state.t)
    new = VMBState(f, EMState(E, B, em.B_background, em.epsilon), state.t + cfg.dt, state.step + 1)
    if cfg.gauss_ceiling is not None:
        res = gauss_residual(new.em, charge_density(f), ops.sgrid)
        rho_n = ops.sgrid.norm(charge_density(f))
        if rho_n > 1e-300 and res > cfg.gauss_ceiling:
            raise GaussCeilingError(f"Gauss residual {res:.3e} above ceiling {cfg.gauss_ceiling:.1e} at step {new.step}")
    return new


# ---------------------------------------------------------------- VPB


@dataclass
class VPBState:
    """Leading-order state: f with E closed by the Poisson equation and a constant field."""

    f: PairDistribution
    B_eff: np.ndarray
    epsilon: float
    t: float = 0.0
    step: int = 0

    @property
    def E(self) -> np.ndarray:
        return poisson_field(charge_density(self.f), self.f.sgrid)

    def copy(self) -> "VPBState":
        return VPBState(self.f.copy(), np.array(self.B_eff, dtype=float), self.epsilon, self.t, self.step)


def _vpb_type_substeps(f: PairDistribution, h: float, ops: SolverOps, cfg: SolverConfig, eps: float,
                       B_eff: np.ndarray, field_fn: Callable[[PairDistribution], np.ndarray],
                       force_terms: Callable[[PairDistribution, np.ndarray], tuple[list, PairDistribution | None]],
                       gamma_rhs: Callable | None, step=None, t=None) -> PairDistribution:
    """Split step for Poisson-closed systems: the field is recomputed at every force substep."""

    def force(g, tau):
        E = field_fn(g)
        drive, src = force_terms(g, E)
        return force_step(g, tau, ops, drive, src, cfg.cfl, dt_check=h)

    if cfg.splitting == "lie":
        f, _ = transport(f, h, ops)
        f = force(f, h)
        f = collision_step(f, h, ops, cfg, gamma_rhs)
        _check("step", 4, f.plus, f.minus, step=step, t=t)
        return f
    h2 = 0.5 * h
    f, _ = transport(f, h2, ops)
    _check("transport", 1, f.plus, f.minus, step=step, t=t)
    f = force(f, h2)
    _check("force", 2, f.plus, f.minus, step=step, t=t)
    f = collision_step(f, h2, ops, cfg, gamma_rhs)
    f = collision_step(f, h2, ops, cfg, gamma_rhs)
    _check("collision", 5, f.plus, f.minus, step=step, t=t)
    f = force(f, h2)
    _check("force", 6, f.plus, f.minus, step=step, t=t)
    f, _ = transport(f, h2, ops)
    _check("transport", 7, f.plus, f.minus, step=step, t=t)
    return f


def step_vpb(state: VPBState, ops: SolverOps, cfg: SolverConfig) -> VPBState:
    """One split step of the VPB system with constant magnetic field B_eff."""
    eps = state.epsilon
    B_eff = np.asarray(state.B_eff, dtype=float)
    Bfield = B_eff.reshape((3,) + (1,) * ops.sgrid.dim)

    def field_fn(g):
        return poisson_field(charge_density(g), ops.sgrid)

    def terms(g, E):
        return _drive_field(E, Bfield, eps, ops), electric_source(E, g, ops)

    gam = _gamma_self(ops) if cfg.collision_mode == "full_bilinear" else None
    f = _vpb_type_substeps(state.f, cfg.dt, ops, cfg, eps, B_eff, field_fn, terms, gam, state.step, state.t)
    return VPBState(f, B_eff, eps, state.t + cfg.dt, state.step + 1)


def vpb_field_residual(prev: VPBState, new: VPBState, dt: float) -> float:
    """‖(E(t+dt) − E(t))/dt + j̄‖ / max(‖j̄‖, tiny), j̄ the longitudinal part of the end-point average.

    The Poisson closure fixes only the curl-free, mean-free part of E, so the transverse and
    zero-mode currents (balanced by ∇×B in the full system) are excluded.
    """
    sg = prev.f.sgrid
    jbar = longitudinal_part(0.5 * (current_density(prev.f) + current_density(new.f)), sg)
    r = (new.E - prev.E) / dt + jbar
    return float(sg.norm(r) / max(sg.norm(jbar), 1e-300))


# ---------------------------------------------------------------- cascade


@dataclass
class CascadeState:
    """Leader, linear correctors (index 1..m-1) and remainder of the ε-expansion."""

    f_P: PairDistribution
    f_levels: list[PairDistribution]
    f_m: PairDistribution
    E_m: np.ndarray
    B_m: np.ndarray
    B_P: np.ndarray
    B_levels: list[np.ndarray]
    epsilon: float
    m: int = 1
    t: float = 0.0
    step: int = 0
    times: dict = field(default_factory=dict)
    _prev: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("expansion order m must be >= 1")
        if len(self.f_levels) != self.m - 1 or len(self.B_levels) != self.m - 1:
            raise ValueError("need exactly m-1 linear levels and constant fields")
        if not self.times:
            self.times = {"P": self.t, "m": self.t, **{i: self.t for i in range(1, self.m)}}

    @property
    def B_eff(self) -> np.ndarray:
        out = np.asarray(self.B_P, dtype=float).copy()
        for j, Bj in enumerate(self.B_levels, start=1):
            out = out + self.epsilon**j * np.asarray(Bj, dtype=float)
        return out

    @property
    def E_P(self) -> np.ndarray:
        return poisson_field(charge_density(self.f_P), self.f_P.sgrid)

    def E_level(self, i: int) -> np.ndarray:
        return poisson_field(charge_density(self.f_levels[i - 1]), self.f_P.sgrid)

    def copy(self) -> "CascadeState":
        return CascadeState(self.f_P.copy(), [g.copy() for g in self.f_levels], self.f_m.copy(), self.E_m.copy(),
                            self.B_m.copy(), np.array(self.B_P, dtype=float), [np.array(b, dtype=float) for b in self.B_levels],
                            self.epsilon, self.m, self.t, self.step, dict(self.times))

    def reassemble(self) -> tuple[PairDistribution, EMState]:
        """f^P + Σ ε^i f^i + ε^m f^m with the matching fields."""
        eps = self.epsilon
        f = self.f_P.copy()
        E = self.E_P
        for i, g in enumerate(self.f_levels, start=1):
            f = f + g * eps**i
            E = E + eps**i * self.E_level(i)
        f = f + self.f_m * eps**self.m
        E = E + eps**self.m * self.E_m
        B = eps**self.m * self.B_m
        return f, EMState(E, B, self.B_eff, eps)


def _mid(prev: PairDistribution | None, cur: PairDistribution) -> PairDistribution:
    return cur if prev is None else (prev + cur) * 0.5


@dataclass
class ForceTerm:
    """One labeled summand of a cascade force: −q₀μ^{-1/2}(E + εv×B)·∇_v(μ^{1/2} target)."""

    label: str
    E: np.ndarray | None
    B: np.ndarray | None
    target: PairDistribution | None  # None: acts on the unknown of the level


def _evaluate_terms(terms: Iterable[ForceTerm], eps: float, ops: SolverOps, like: PairDistribution):
    """Split terms into the frozen source (targets known) and the drive on the unknown."""
    src = None
    E_d = None
    B_d = None
    for term in terms:
        if term.target is None:
            if term.E is not None:
                E_d = term.E if E_d is None else E_d + term.E
            if term.B is not None:
                B_d = term.B if B_d is None else B_d + term.B
            continue
        drive = _drive_field(term.E, term.B, eps, ops)
        val = field_force(term.target, drive, ops)
        src = val if src is None else src + val
    return E_d, B_d, src


def _level_fields(state: CascadeState, prev: CascadeState | None, upto: int):
    """Midpoint f^P, f^j and their Poisson fields for j < upto."""
    sg = state.f_P.sgrid
    fP = _mid(None if prev is None else prev.f_P, state.f_P)
    EP = poisson_field(charge_density(fP), sg)
    fl, El = {}, {}
    for j in range(1, upto):
        g = _mid(None if prev is None else prev.f_levels[j - 1], state.f_levels[j - 1])
        fl[j] = g
        El[j] = poisson_field(charge_density(g), sg)
    return fP, EP, fl, El


def step_cascade_linear(i: int, cascade: CascadeState, ops: SolverOps, cfg: SolverConfig) -> CascadeState:
    """Advance linear level i; the leader and lower levels must already be at t + dt."""
    c = cascade
    if not 1 <= i < c.m:
        raise CascadeOrderError(f"no linear level {i} for m={c.m}")
    t_i = c.times[i]
    need = t_i + cfg.dt
    if abs(c.times["P"] - need) > 1e-9 or any(abs(c.times[j] - need) > 1e-9 for j in range(1, i)):
        raise CascadeOrderError(f"level {i} advanced before its prerequisites (times {c.times})")
    prev = c._prev.get("state")
    eps = c.epsilon
    fP, EP, fl, El = _level_fields(c, prev, i)
    B_eff = c.B_eff.reshape((3,) + (1,) * ops.sgrid.dim)
    sg = ops.sgrid

    def field_fn(g):
        return poisson_field(charge_density(g), sg)

    def terms(g, Ei):
        table = [
            ForceTerm("E_i on f_P", Ei, None, fP),
            ForceTerm("E_P on f_i", EP, None, None),
            ForceTerm("B_eff on f_i", None, B_eff, None),
        ]
        for j1 in range(1, i):
            j2 = i - j1
            if 0 < j2 < i:
                table.append(ForceTerm(f"E_{j1} on f_{j2}", El[j1], None, fl[j2]))
        E_d, B_d, src = _evaluate_terms(table, eps, ops, g)
        s = electric_source(Ei, g, ops)
        src = s if src is None else src + s
        return _drive_field(E_d, B_d, eps, ops), src

    gam = None
    if cfg.collision_mode == "full_bilinear":
        model = ops.model

        def gam(g):
            out = gamma_bilinear(fP, g, model) + gamma_bilinear(g, fP, model)
            for j1 in range(1, i):
                j2 = i - j1
                if 0 < j2 < i:
                    out = out + gamma_bilinear(fl[j1], fl[j2], model)
            return out

    g_new = _vpb_type_substeps(c.f_levels[i - 1], cfg.dt, ops, cfg, eps, c.B_eff, field_fn, terms, gam, c.step, c.t)
    c.f_levels[i - 1] = g_new
    c.times[i] = need
    return c


def remainder_force_table(c: CascadeState, fP, EP, fl, El, E_m, B_m) -> list[ForceTerm]:
    """Every field-derivative summand of the remainder equation, labeled."""
    eps, m = c.epsilon, c.m
    dim = fP.sgrid.dim
    B_eff = c.B_eff.reshape((3,) + (1,) * dim)
    low = fP
    for j, g in fl.items():
        low = low + g * eps**j
    table = [
        ForceTerm("E_m on f_P", E_m, None, fP),
        ForceTerm("E_P on f_m", EP, None, None),
    ]
    for j1 in range(1, m):
        for j2 in range(1, m):
            if j1 + j2 >= m:
                table.append(ForceTerm(f"eps^{j1 + j2 - m} E_{j1} on f_{j2}", eps ** (j1 + j2 - m) * El[j1], None, fl[j2]))
    for j1 in range(1, m):
        table.append(ForceTerm(f"eps^{j1} E_{j1} on f_m", eps**j1 * El[j1], None, None))
        table.append(ForceTerm(f"eps^{j1} E_m on f_{j1}", eps**j1 * E_m, None, fl[j1]))
    table += [
        ForceTerm("eps (v x B_m) on f_P + sum eps^i f_i", None, B_m, low),
        ForceTerm("eps (v x B_eff) on f_m", None, B_eff, None),
        ForceTerm("eps^m E_m on f_m", eps**m * E_m, None, None),
        ForceTerm("eps^(m+1) (v x B_m) on f_m", None, eps**m * B_m, None),
    ]
    return table


def step_remainder(cascade: CascadeState, ops: SolverOps, cfg: SolverConfig) -> CascadeState:
    """Advance (f^m, E^m, B^m) with all lower levels already at t + dt."""
    c = cascade
    need = c.times["m"] + cfg.dt
    if abs(c.times["P"] - need) > 1e-9 or any(abs(c.times[j] - need) > 1e-9 for j in range(1, c.m)):
        raise CascadeOrderError(f"remainder advanced before lower levels (times {c.times})")
    prev = c._prev.get("state")
    eps, m = c.epsilon, c.m
    fP, EP, fl, El = _level_fields(c, prev, m)
    sg = ops.sgrid
    zeroB = np.zeros(3)

    # the unknown-independent parts of the drive: E_P, ε^j E_j and B_eff; E_m, B_m enter through
    # e_scale/b_scale so the structure matches step_vmb term for term
    low_E = None
    for term in remainder_force_table(c, fP, EP, fl, El, np.zeros_like(c.E_m), np.zeros_like(c.B_m)):
        if term.target is None and term.E is not None and not term.label.startswith("eps^m E_m"):
            low_E = term.E if low_E is None else low_E + term.E

    def drive_extra():
        return (None if low_E is None or not np.any(low_E) else low_E), None

    def extra_source(E_, B_):
        table = remainder_force_table(c, fP, EP, fl, El, E_, B_)
        src = None
        for term in table:
            if term.target is None:
                continue
            drive = _drive_field(term.E, term.B, eps, ops)
            if all(x is None for x in drive):
                continue
            val = field_force(term.target, drive, ops)
            src = val if src is None else src + val
        return src

    gam = None
    if cfg.collision_mode == "full_bilinear":
        model = ops.model

        def gam(g):
            out = gamma_bilinear(g, g, model) * eps**m
            if np.any(fP.plus) or np.any(fP.minus):
                out = out + gamma_bilinear(fP, g, model) + gamma_bilinear(g, fP, model)
            levels = dict(fl)
            levels[m] = g
            for j1 in range(1, m + 1):
                for j2 in range(1, m + 1):
                    if j1 + j2 >= m and not (j1 == m and j2 == m):
                        out = out + gamma_bilinear(levels[j1], levels[j2], model) * eps ** (j1 + j2 - m)
            return out

    cscale = 1.0 if cfg.remainder_source_scaling == "derived" else 1.0 / eps
    f, E, B = _vmb_substeps(c.f_m, c.E_m, c.B_m, eps, c.B_eff, cfg.dt, ops, cfg,
                            e_scale=eps**m, b_scale=eps**m, extra_source=extra_source, drive_extra=drive_extra,
                            gamma_rhs=gam, current_scale=cscale, step=c.step, t=c.t)
    del zeroB
    c.f_m, c.E_m, c.B_m = f, E, B
    c.times["m"] = need
    return c


def step_leader(cascade: CascadeState, ops: SolverOps, cfg: SolverConfig) -> CascadeState:
    c = cascade
    if abs(c.times["P"] - c.times["m"]) > 1e-9:
        raise CascadeOrderError("leader already advanced this step")
    c._prev["state"] = CascadeState(c.f_P.copy(), [g.copy() for g in c.f_levels], c.f_m, c.E_m, c.B_m, c.B_P,
                                    c.B_levels, c.epsilon, c.m, c.t, c.step, dict(c.times))
    lead = VPBState(c.f_P, c.B_eff, c.epsilon, c.t, c.step)
    c.f_P = step_vpb(lead, ops, cfg).f
    c.times["P"] = c.times["P"] + cfg.dt
    return c


def step_cascade(cascade: CascadeState, ops: SolverOps, cfg: SolverConfig) -> CascadeState:
    """Leader, then linear levels in order, then the remainder."""
    c = cascade.copy()
    c._prev = {}
    step_leader(c, ops, cfg)
    for i in range(1, c.m):
        step_cascade_linear(i, c, ops, cfg)
    step_remainder(c, ops, cfg)
    c._prev = {}
    c.t = c.t + cfg.dt
    c.step += 1
    return c


# ---------------------------------------------------------------- driver


@dataclass
class Trajectory:
    """Recorded rows plus the final state."""

    rows: list[dict]
    final: object
    columns: list[str] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def stepper_for(state) -> Callable:
    if isinstance(state, VMBState):
        return step_vmb
    if isinstance(state, VPBState):
        return step_vpb
    if isinstance(state, CascadeState):
        return step_cascade
    raise TypeError(f"no stepper for {type(state).__name__}")


def run(initial, ops: SolverOps, cfg: SolverConfig, recorder: Callable | None = None,
        checkpoint: Callable | None = None, start_step: int = 0) -> Trajectory:
    """Step from `initial` to cfg.t_end, recording every cfg.record_every steps.

    `recorder(state) -> dict` produces one row; `checkpoint(state)` is called every
    cfg.checkpoint_every steps. Resuming passes the restored state and its step.
    """
    step_fn = stepper_for(initial)
    state = initial
    rows: list[dict] = []
    cks: list[str] = []
    n_steps = cfg.n_steps
    if n_steps == 0:
        # nothing to integrate: the initial state comes back with an empty series
        return Trajectory([], state, [], [])
    if recorder is not None and start_step % cfg.record_every == 0:
        rows.append(recorder(state))
    for k in range(start_step, n_steps):
        try:
            state = step_fn(state, ops, cfg)
        except NumericalAbort as exc:
            exc.step = k + 1
            raise
        if recorder is not None and (k + 1) % cfg.record_every == 0:
            rows.append(recorder(state))
        if checkpoint is not None and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            p = checkpoint(state)
            if p is not None:
                cks.append(str(p))
    cols = list(rows[0].keys()) if rows else []
    return Trajectory(rows, state, cols, cks)
