"""Energy and dissipation functionals, time-velocity weighted norms, negative Sobolev
norms and the shifted electric field, assembled into per-time report rows.

All equivalence constants are fixed to one. Spatial derivatives are spectral,
velocity derivatives are finite differences on the velocity lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Sequence

import numpy as np

from .em_fields import EMState, charge_density, divergence, gauss_residual
from .macro_micro import MacroState, macro_coefficients, micro_part
from .phase_grid import (
    PairDistribution,
    SpatialGrid,
    VelocityGrid,
    multi_indices,
    spectral_x_derivative,
    velocity_derivative,
)

MAX_ORDER = 3


class DiagnosticsError(ValueError):
    pass


class NonzeroMeanError(DiagnosticsError):
    pass


@dataclass(frozen=True)
class WeightSpec:
    """w_{ℓ−|β|,κ}(t, v) = ⟨v⟩^{κ(ℓ−|β|)} exp(q⟨v⟩²/(1+t)^ϑ)."""

    ell: float = 2.0
    kappa: float = 1.0
    q: float = 0.05
    vartheta: float = 0.25

    def __post_init__(self) -> None:
        if self.ell < 0:
            raise DiagnosticsError("weight order ell must be nonnegative")
        if not 0.0 <= self.q < 1.0:
            raise DiagnosticsError("q must lie in [0, 1)")
        if not self.vartheta > 0:
            raise DiagnosticsError("vartheta must be positive")

    def weight(self, t: float, vgrid: VelocityGrid, n_beta: int = 0) -> np.ndarray:
        if self.ell < n_beta:
            raise DiagnosticsError(f"weight order {self.ell} below velocity derivative order {n_beta}")
        br2 = 1.0 + vgrid.speed2
        return br2 ** (0.5 * self.kappa * (self.ell - n_beta)) * np.exp(self.q * br2 / (1.0 + t) ** self.vartheta)

    def label(self) -> str:
        return f"l{self.ell:g}_k{self.kappa:g}_q{self.q:g}_t{self.vartheta:g}"

    def to_dict(self) -> dict:
        return dict(ell=self.ell, kappa=self.kappa, q=self.q, vartheta=self.vartheta)


@dataclass(frozen=True)
class WeightedNormSpec:
    """One weighted-norm column: weight, spatial index α, velocity index β, variant."""

    weight: WeightSpec
    alpha: tuple[int, ...]
    beta: tuple[int, int, int]
    variant: str = "plain"

    def __post_init__(self) -> None:
        if self.variant not in ("plain", "nu", "vbracket"):
            raise DiagnosticsError(f"unknown weighted-norm variant {self.variant!r}")

    @property
    def column(self) -> str:
        a = "".join(str(x) for x in self.alpha)
        b = "".join(str(x) for x in self.beta)
        suffix = "" if self.variant == "plain" else "_" + self.variant
        return f"w_{self.weight.label()}_a{a}_b{b}{suffix}"


# ---------------------------------------------------------------- derivatives


def derivative(g: np.ndarray, sgrid: SpatialGrid, vgrid: VelocityGrid | None,
               alpha: Sequence[int], beta: Sequence[int] = (0, 0, 0)) -> np.ndarray:
    """∂^α_β g with spectral x-derivatives and finite-difference v-derivatives."""
    out = np.asarray(g, dtype=float)
    for ax, k in enumerate(alpha):
        if k:
            out = spectral_x_derivative(out, sgrid, ax, k)
    if any(beta):
        if vgrid is None:
            raise DiagnosticsError("velocity derivatives need a velocity grid")
        for ax, k in enumerate(beta):
            if k:
                out = velocity_derivative(out, vgrid, ax, k)
    return out


def _pair_sq(f: PairDistribution, alpha, beta, weight: np.ndarray | None = None) -> float:
    w = f.sgrid.cell_volume * f.vgrid.cell
    total = 0.0
    for g in (f.plus, f.minus):
        dg = derivative(g, f.sgrid, f.vgrid, alpha, beta)
        if weight is not None:
            dg = dg * weight
        total += float(np.sum(dg * dg))
    return total * w


def _field_sq(F: np.ndarray, sgrid: SpatialGrid, alpha) -> float:
    """‖∂^α F‖² for a scalar field (*S) or a vector field (3, *S)."""
    F = np.asarray(F, dtype=float)
    if not any(alpha):
        return sgrid.norm(F) ** 2
    if F.ndim == sgrid.dim:
        return sgrid.norm(derivative(F, sgrid, None, alpha)) ** 2
    return sum(sgrid.norm(derivative(F[i], sgrid, None, alpha)) ** 2 for i in range(F.shape[0]))


def _check_order(n: int) -> None:
    if not 0 <= n <= MAX_ORDER:
        raise DiagnosticsError(f"derivative order n must lie in [0, {MAX_ORDER}], got {n}")


def _x_index(sgrid: SpatialGrid, alpha_total: int) -> list[tuple[int, ...]]:
    return [a for a in multi_indices(sgrid.dim, alpha_total) if sum(a) == alpha_total]


def _fields_of(state) -> tuple[PairDistribution, EMState]:
    f = state.f
    em = getattr(state, "em", None)
    if em is None:
        E = state.E
        em = EMState(E, np.zeros_like(E), getattr(state, "B_eff", np.zeros(3)), getattr(state, "epsilon", 1.0))
    return f, em


# ---------------------------------------------------------------- functionals


def energy_functional(state, n: int) -> float:
    """Σ_{|α|+|β|≤n} ‖∂^α_β f‖² + Σ_{|α|≤n} ‖∂^α[E, B̃]‖²."""
    _check_order(n)
    f, em = _fields_of(state)
    sg = f.sgrid
    total = 0.0
    for na in range(n + 1):
        for alpha in _x_index(sg, na):
            for beta in multi_indices(3, n - na):
                total += _pair_sq(f, alpha, beta)
            total += _field_sq(em.E, sg, alpha) + _field_sq(em.B_tilde, sg, alpha)
    return total


def nu_norm_sq(g: PairDistribution, nu: np.ndarray) -> float:
    """‖g‖²_ν summed over both species."""
    w = g.sgrid.cell_volume * g.vgrid.cell
    nu = np.reshape(nu, g.vgrid.shape)
    return float((np.sum(nu * g.plus**2) + np.sum(nu * g.minus**2)) * w)


def _macro_sq(m: MacroState, sg: SpatialGrid, alpha) -> float:
    return sum(_field_sq(x, sg, alpha) for x in (m.a_plus, m.a_minus, m.b, m.c))


def shifted_field_norm(em: EMState, macro: MacroState, sgrid: SpatialGrid) -> float:
    """‖E + ε b×𝔅‖."""
    Bbg = np.asarray(em.B_background, dtype=float)
    bxB = np.stack([
        macro.b[1] * Bbg[2] - macro.b[2] * Bbg[1],
        macro.b[2] * Bbg[0] - macro.b[0] * Bbg[2],
        macro.b[0] * Bbg[1] - macro.b[1] * Bbg[0],
    ])
    return sgrid.norm(em.E + em.epsilon * bxB)


def dissipation_functional(state, n: int, nu: np.ndarray) -> float:
    """Σ_{1≤|α|≤n}‖∂^α[a±, b, c]‖² + Σ_{|α|+|β|≤n}‖∂^α_β{I−P}f‖²_ν + ‖a₊−a₋‖²
    + ε²‖E + εb×𝔅‖² + ε² Σ_{1≤|α|≤n−1}‖∂^α[E, B̃]‖².
    """
    _check_order(n)
    f, em = _fields_of(state)
    sg = f.sgrid
    eps = em.epsilon
    m = macro_coefficients(f)
    mic = micro_part(f)
    total = 0.0
    for na in range(1, n + 1):
        for alpha in _x_index(sg, na):
            total += _macro_sq(m, sg, alpha)
    for na in range(n + 1):
        for alpha in _x_index(sg, na):
            for beta in multi_indices(3, n - na):
                if any(alpha) or any(beta):
                    dp = derivative(mic.plus, sg, f.vgrid, alpha, beta)
                    dm = derivative(mic.minus, sg, f.vgrid, alpha, beta)
                    total += nu_norm_sq(mic.like(dp, dm), nu)
                else:
                    total += nu_norm_sq(mic, nu)
    total += sg.norm(m.a_plus - m.a_minus) ** 2
    total += eps**2 * shifted_field_norm(em, m, sg) ** 2
    for na in range(1, n):
        for alpha in _x_index(sg, na):
            total += eps**2 * (_field_sq(em.E, sg, alpha) + _field_sq(em.B_tilde, sg, alpha))
    return total


def weighted_norm(f, spec: WeightSpec, t: float, alpha: Sequence[int], beta: Sequence[int],
                  sgrid: SpatialGrid | None = None, vgrid: VelocityGrid | None = None,
                  variant: str = "plain", nu: np.ndarray | None = None) -> float:
    """‖w_{ℓ−|β|,κ}(t) ∂^α_β f‖; variant 'nu' adds the ν weight, 'vbracket' a factor ⟨v⟩."""
    if isinstance(f, PairDistribution):
        sgrid, vgrid = f.sgrid, f.vgrid
        comps = (f.plus, f.minus)
    else:
        if sgrid is None or vgrid is None:
            raise DiagnosticsError("plain arrays need explicit grids")
        comps = (np.asarray(f, dtype=float),)
    w = spec.weight(t, vgrid, int(sum(beta)))
    if variant == "nu":
        if nu is None:
            raise DiagnosticsError("the ν-weighted variant needs ν")
        w = w * np.sqrt(np.reshape(nu, vgrid.shape))
    elif variant == "vbracket":
        w = w * vgrid.bracket
    elif variant != "plain":
        raise DiagnosticsError(f"unknown variant {variant!r}")
    total = 0.0
    for g in comps:
        dg = derivative(g, sgrid, vgrid, alpha, beta) * w
        total += float(np.sum(dg * dg))
    return math.sqrt(total * sgrid.cell_volume * vgrid.cell)


# ---------------------------------------------------------------- negative Sobolev


def _data_of(g, sgrid: SpatialGrid | None):
    if isinstance(g, PairDistribution):
        return [g.plus, g.minus], g.sgrid
    if sgrid is None:
        raise DiagnosticsError("plain arrays need a spatial grid")
    return [np.asarray(g, dtype=float)], sgrid


def lambda_power(g: np.ndarray, sgrid: SpatialGrid, s: float) -> np.ndarray:
    """Λ^s g: multiply mode ξ ≠ 0 by |ξ|^s; the zero mode is removed."""
    gh = sgrid.forward(g)
    xn = sgrid.xi_norm
    factor = np.where(xn > 0, np.where(xn > 0, xn, 1.0) ** s, 0.0)
    gh = gh * factor.reshape(factor.shape + (1,) * (gh.ndim - sgrid.dim))
    return sgrid.inverse(gh)


def negative_sobolev_norm(g, varrho: float, sgrid: SpatialGrid | None = None, vgrid: VelocityGrid | None = None,
                          tol: float = 1e-10) -> float:
    """‖Λ^{−ϱ} g‖ for mean-zero g (spatial field, phase-space array or PairDistribution)."""
    comps, sg = _data_of(g, sgrid)
    if isinstance(g, PairDistribution):
        vgrid = g.vgrid
    total = 0.0
    for c in comps:
        mean = np.mean(c, axis=sg.axes)
        scale = max(float(np.max(np.abs(c))), 1e-300) if c.size else 1.0
        if np.max(np.abs(mean)) > tol * scale:
            raise NonzeroMeanError(f"field has spatial mean {float(np.max(np.abs(mean))):.3e}")
        lg = lambda_power(c, sg, -varrho)
        total += float(np.sum(lg * lg))
    w = sg.cell_volume * (vgrid.cell if vgrid is not None and comps[0].ndim > sg.dim else 1.0)
    return math.sqrt(total * w)


# ---------------------------------------------------------------- reports


@dataclass
class DiagnosticsConfig:
    n_max: int = 3
    varrhos: tuple[float, ...] = (0.5, 1.0)
    weighted: tuple[WeightedNormSpec, ...] = ()

    def __post_init__(self) -> None:
        _check_order(self.n_max)
        for r in self.varrhos:
            if not 0.5 <= r < 1.5:
                raise DiagnosticsError(f"varrho must lie in [1/2, 3/2), got {r}")

    def columns(self) -> list[str]:
        cols = ["t"]
        cols += [f"E{n}" for n in range(self.n_max + 1)]
        cols += [f"D{n}" for n in range(self.n_max + 1)]
        cols += ["gauss_residual", "shifted_field"]
        cols += [f"neg_sobolev_{r:g}" for r in self.varrhos]
        cols += [w.column for w in self.weighted]
        return cols


def default_weighted(dim: int) -> tuple[WeightedNormSpec, ...]:
    ws = WeightSpec()
    zero = (0,) * dim
    one = (1,) + (0,) * (dim - 1)
    return (
        WeightedNormSpec(ws, zero, (0, 0, 0)),
        WeightedNormSpec(ws, one, (0, 0, 0)),
        WeightedNormSpec(ws, zero, (1, 0, 0)),
        WeightedNormSpec(ws, zero, (0, 0, 0), "nu"),
    )


@dataclass
class EnergyReport:
    t: float
    energies: list[float]
    dissipations: list[float]
    gauss_residual: float
    shifted_field: float
    neg_sobolev: dict[float, float] = field(default_factory=dict)
    weighted: dict[str, float] = field(default_factory=dict)

    def row(self, cfg: DiagnosticsConfig) -> dict[str, float]:
        out: dict[str, float] = {"t": self.t}
        for n, e in enumerate(self.energies):
            out[f"E{n}"] = e
        for n, d in enumerate(self.dissipations):
            out[f"D{n}"] = d
        out["gauss_residual"] = self.gauss_residual
        out["shifted_field"] = self.shifted_field
        for r in cfg.varrhos:
            out[f"neg_sobolev_{r:g}"] = self.neg_sobolev[r]
        for w in cfg.weighted:
            out[w.column] = self.weighted[w.column]
        return out

    def is_valid(self) -> bool:
        vals = self.energies + self.dissipations + [self.gauss_residual, self.shifted_field]
        vals += list(self.neg_sobolev.values()) + list(self.weighted.values())
        return all(math.isfinite(v) and v >= 0 for v in vals)


def energy_report(state, nu: np.ndarray, cfg: DiagnosticsConfig, t: float | None = None) -> EnergyReport:
    f, em = _fields_of(state)
    sg = f.sgrid
    t = float(state.t if t is None else t)
    rho = charge_density(f)
    gr = gauss_residual(em, rho, sg) if sg.norm(rho) > 1e-300 else sg.norm(divergence(em.E, sg))
    m = macro_coefficients(f)
    centred = f.like(f.plus - np.mean(f.plus, axis=sg.axes), f.minus - np.mean(f.minus, axis=sg.axes))
    rep = EnergyReport(
        t=t,
        energies=[energy_functional(state, n) for n in range(cfg.n_max + 1)],
        dissipations=[dissipation_functional(state, n, nu) for n in range(cfg.n_max + 1)],
        gauss_residual=float(gr),
        shifted_field=shifted_field_norm(em, m, sg),
        neg_sobolev={r: negative_sobolev_norm(centred, r) for r in cfg.varrhos},
        weighted={w.column: weighted_norm(f, w.weight, t, w.alpha, w.beta, variant=w.variant, nu=nu)
                  for w in cfg.weighted},
    )
    return rep


def make_recorder(nu: np.ndarray, cfg: DiagnosticsConfig):
    """Recorder for kinetic_solver.run producing ordered CSV rows."""

    def record(state) -> dict[str, float]:
        if hasattr(state, "reassemble"):
            f, em = state.reassemble()
            state = SimpleNamespace(f=f, em=em, t=state.t)
        return energy_report(state, nu, cfg).row(cfg)

    return record
