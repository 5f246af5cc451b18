"""Macro-micro decomposition: projection onto the collision invariants, macroscopic
coefficients (a₊, a₋, b, c), the moment functionals A, B, G, and moment-law residuals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .phase_grid import PairDistribution, SpatialGrid, VelocityGrid, spectral_x_derivative

VAXES = (-3, -2, -1)


class MissingSnapshotError(ValueError):
    pass


@dataclass
class MacroState:
    """Macroscopic fields; b has shape (3, *spatial)."""

    a_plus: np.ndarray
    a_minus: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.a_plus[None], self.a_minus[None], self.b, self.c[None]])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "MacroState":
        return cls(arr[0], arr[1], arr[2:5], arr[5])

    def to_csv(self, path: str | Path, sgrid: SpatialGrid) -> Path:
        """Write columns x, a_plus, a_minus, b1, b2, b3, c (one row per grid point)."""
        path = Path(path)
        xs = [g.ravel() for g in sgrid.mesh()]
        xcols = ["x"] if sgrid.dim == 1 else [f"x{i + 1}" for i in range(sgrid.dim)]
        cols = xcols + ["a_plus", "a_minus", "b1", "b2", "b3", "c"]
        data = xs + [self.a_plus.ravel(), self.a_minus.ravel()] + [bi.ravel() for bi in self.b] + [self.c.ravel()]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*data):
                w.writerow([repr(float(x)) for x in row])
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "MacroState":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        return cls(col("a_plus"), col("a_minus"), np.stack([col("b1"), col("b2"), col("b3")]), col("c"))


# ---------------------------------------------------------------- lattice basis


@dataclass(frozen=True)
class _Basis:
    """Null-space basis on one lattice and the inverse of its 6×6 coefficient Gram matrix."""

    plus: np.ndarray  # (6, n, n, n)
    minus: np.ndarray
    dual_plus: np.ndarray  # coefficient functionals, cell weight included
    dual_minus: np.ndarray
    gram_inv: np.ndarray


@lru_cache(maxsize=8)
def _basis(vgrid: VelocityGrid) -> _Basis:
    sm = vgrid.sqrt_mu
    v = vgrid.nodes
    zero = np.zeros_like(sm)
    quad = (vgrid.speed2 - 3.0) * sm
    plus = np.stack([sm, zero, v[..., 0] * sm, v[..., 1] * sm, v[..., 2] * sm, quad])
    minus = np.stack([zero, sm, v[..., 0] * sm, v[..., 1] * sm, v[..., 2] * sm, quad])
    w = vgrid.cell
    dual_plus = np.stack([sm, zero, 0.5 * v[..., 0] * sm, 0.5 * v[..., 1] * sm, 0.5 * v[..., 2] * sm, quad / 12.0]) * w
    dual_minus = np.stack([zero, sm, 0.5 * v[..., 0] * sm, 0.5 * v[..., 1] * sm, 0.5 * v[..., 2] * sm, quad / 12.0]) * w
    gram = (np.tensordot(dual_plus, plus, axes=(VAXES, VAXES))
            + np.tensordot(dual_minus, minus, axes=(VAXES, VAXES)))
    return _Basis(plus, minus, dual_plus, dual_minus, np.linalg.inv(gram))


def raw_moments(g: PairDistribution) -> np.ndarray:
    """Uncorrected quadrature of the six coefficient formulas, shape (6, *spatial)."""
    B = _basis(g.vgrid)
    return (np.tensordot(B.dual_plus, g.plus, axes=(VAXES, VAXES))
            + np.tensordot(B.dual_minus, g.minus, axes=(VAXES, VAXES)))


def macro_coefficients(g: PairDistribution) -> MacroState:
    """(a₊, a₋, b, c) of g, Gram-corrected so that reconstruction is inverted exactly."""
    B = _basis(g.vgrid)
    return MacroState.from_array(np.tensordot(B.gram_inv, raw_moments(g), axes=(1, 0)))


def reconstruct(m: MacroState, sgrid: SpatialGrid, vgrid: VelocityGrid) -> PairDistribution:
    """The macroscopic distribution with coefficients m."""
    B = _basis(vgrid)
    arr = m.as_array()
    plus = np.tensordot(arr, B.plus, axes=(0, 0))
    minus = np.tensordot(arr, B.minus, axes=(0, 0))
    return PairDistribution(plus, minus, sgrid, vgrid)


def project_P(g: PairDistribution) -> PairDistribution:
    return reconstruct(macro_coefficients(g), g.sgrid, g.vgrid)


def micro_part(g: PairDistribution) -> PairDistribution:
    return g - project_P(g)


# ---------------------------------------------------------------- moment functionals


def _vquad(weight: np.ndarray, g: np.ndarray, vgrid: VelocityGrid) -> np.ndarray:
    return np.tensordot(g, weight, axes=(VAXES, (0, 1, 2))) * vgrid.cell


def _vquad_lead(weight: np.ndarray, g: np.ndarray, vgrid: VelocityGrid) -> np.ndarray:
    """Like _vquad but with weight of shape (k..., n, n, n); result has k... leading."""
    k = weight.ndim - 3
    out = np.tensordot(weight, g, axes=(tuple(range(k, k + 3)), VAXES)) * vgrid.cell
    return out


def moment_A(g: np.ndarray, vgrid: VelocityGrid) -> np.ndarray:
    """A_mj(g) = ∫(v_m v_j − δ_mj) μ^{1/2} g dv, shape (3, 3, *spatial)."""
    v = vgrid.nodes
    sm = vgrid.sqrt_mu
    w = np.einsum("...m,...j->mj...", v, v) - np.eye(3)[:, :, None, None, None]
    return _vquad_lead(w * sm, g, vgrid)


def moment_B(g: np.ndarray, vgrid: VelocityGrid) -> np.ndarray:
    """B_j(g) = (1/10)∫(|v|² − 5) v_j μ^{1/2} g dv, shape (3, *spatial)."""
    v = vgrid.nodes
    w = 0.1 * np.moveaxis(v, -1, 0) * ((vgrid.speed2 - 5.0) * vgrid.sqrt_mu)
    return _vquad_lead(w, g, vgrid)


def velocity_flux(g: np.ndarray, vgrid: VelocityGrid) -> np.ndarray:
    """∫ v μ^{1/2} g dv, shape (3, *spatial)."""
    return _vquad_lead(np.moveaxis(vgrid.nodes, -1, 0) * vgrid.sqrt_mu, g, vgrid)


def moment_G(f: PairDistribution) -> np.ndarray:
    """G = ⟨v μ^{1/2}, {I−P}f · q₁⟩, shape (3, *spatial)."""
    mic = micro_part(f)
    return velocity_flux(mic.plus - mic.minus, f.vgrid)


# ---------------------------------------------------------------- micro identity


def _grad_Pf(m: MacroState, vgrid: VelocityGrid, species: int) -> np.ndarray:
    """Analytic ∇_v of one species of the reconstruction, shape (3, *spatial, n, n, n)."""
    v = vgrid.nodes
    sm = vgrid.sqrt_mu
    a = m.a_plus if species == 0 else m.a_minus
    sp = a.shape
    ex = (Ellipsis,) + (None,) * 3
    vv = np.moveaxis(v, -1, 0)  # (3, n, n, n)
    bv = sum(m.b[i][ex] * vv[i] for i in range(3))
    poly = a[ex] + bv + m.c[ex] * (vgrid.speed2 - 3.0)
    out = np.empty((3,) + sp + vgrid.shape)
    for i in range(3):
        out[i] = (m.b[i][ex] + 2.0 * m.c[ex] * vv[i] - 0.5 * vv[i] * poly) * sm
    return out


def verify_micro_identity(f: PairDistribution, E: np.ndarray, B_const: Sequence[float], eps: float) -> float:
    """Relative defect of {I−P}{E·vμ^{1/2}q₁ − q₀ε(v×𝔅)·∇_v Pf} = {E + εb×𝔅}·vμ^{1/2}q₁."""
    vg = f.vgrid
    B_const = np.asarray(B_const, dtype=float)
    v = vg.nodes
    sm = vg.sqrt_mu
    ex = (Ellipsis,) + (None,) * 3
    m = macro_coefficients(f)
    Ev = sum(E[i][ex] * v[..., i] for i in range(3)) * sm
    vxB = np.cross(v, B_const)  # (n, n, n, 3)
    parts = []
    for sp, sign in ((0, 1.0), (1, -1.0)):
        grad = _grad_Pf(m, vg, sp)
        rot = sum(vxB[..., i] * grad[i] for i in range(3))
        parts.append(sign * Ev - sign * eps * rot)
    lhs = micro_part(PairDistribution(parts[0], parts[1], f.sgrid, vg))
    shifted = E + eps * np.cross(m.b, B_const, axisa=0, axisb=0, axisc=0)
    sv = sum(shifted[i][ex] * v[..., i] for i in range(3)) * sm
    rhs = PairDistribution(sv, -sv, f.sgrid, vg)
    diff = lhs - rhs
    den = rhs.norm()
    if den == 0.0:
        return diff.norm()
    return diff.norm() / den


# ---------------------------------------------------------------- balance-law residuals


LAW_NAMES = ("continuity", "charge", "momentum", "energy", "current", "stress", "heat_flux")


def _div(F: np.ndarray, sgrid: SpatialGrid) -> np.ndarray:
    return sum(spectral_x_derivative(F[i], sgrid, i, 1) for i in range(sgrid.dim))


def _grad(g: np.ndarray, sgrid: SpatialGrid) -> np.ndarray:
    out = np.zeros((3,) + g.shape)
    for i in range(sgrid.dim):
        out[i] = spectral_x_derivative(g, sgrid, i, 1)
    return out


def _discrete_em_terms(F: PairDistribution, vg: VelocityGrid) -> dict[str, np.ndarray]:
    """Minus the test-function moments of a discrete force field F, law by law."""
    vv = np.moveaxis(vg.nodes, -1, 0)
    sm = vg.sqrt_mu
    Fs, Fd = F.plus + F.minus, F.plus - F.minus
    return {
        "continuity": -0.5 * _vquad(sm, Fs, vg),
        "charge": -_vquad(sm, Fd, vg),
        "momentum": -0.5 * velocity_flux(Fs, vg),
        "energy": -_vquad((vg.speed2 - 3.0) * sm, Fs, vg) / 12.0,
        "current": -velocity_flux(Fd, vg),
        "stress": -moment_A(Fs, vg),
        "heat_flux": -moment_B(Fs, vg),
    }


def _moment_terms(f: PairDistribution, E: np.ndarray, Btot: np.ndarray, eps: float,
                  apply_L: Callable | None, gamma: Callable | None,
                  force: Callable | None = None) -> dict[str, np.ndarray]:
    """Everything except ∂_t for one snapshot; the ∂_t quantity is returned under 'q:*'.

    With `force(f, E, Btot, eps) -> PairDistribution` the electromagnetic terms are the
    moments of that discrete force instead of their continuum closed forms.
    """
    vg, sg = f.vgrid, f.sgrid
    v = vg.nodes
    vv = np.moveaxis(v, -1, 0)
    sm = vg.sqrt_mu
    ex = (Ellipsis,) + (None,) * 3
    m = macro_coefficients(f)
    mic = micro_part(f)
    s_mic = mic.plus + mic.minus
    d_mic = mic.plus - mic.minus
    s = f.plus + f.minus
    d = f.plus - f.minus
    G = velocity_flux(d_mic, vg)
    A_s = moment_A(s_mic, vg)
    A_d = moment_A(d_mic, vg)
    B_s = moment_B(s_mic, vg)
    out: dict[str, np.ndarray] = {}
    asum = m.a_plus + m.a_minus
    adif = m.a_plus - m.a_minus

    out["q:continuity"] = 0.5 * asum
    out["continuity"] = _div(m.b, sg)

    out["q:charge"] = adif
    out["charge"] = _div(G, sg)

    divA_s = np.stack([_div(A_s[i], sg) for i in range(3)])
    GxB = np.cross(G, Btot, axisa=0, axisb=0, axisc=0)
    out["q:momentum"] = m.b
    out["momentum"] = 0.5 * _grad(asum, sg) + 2.0 * _grad(m.c, sg) + 0.5 * divA_s
    em = {"momentum": -0.5 * E * adif - 0.5 * eps * GxB}

    out["q:energy"] = m.c
    out["energy"] = _div(m.b, sg) / 3.0 + (5.0 / 6.0) * _div(B_s, sg)
    em["energy"] = -np.sum(E * G, axis=0) / 6.0

    divA_d = np.stack([_div(A_d[i], sg) for i in range(3)])
    bxB = np.cross(m.b, Btot, axisa=0, axisb=0, axisc=0)
    cur = _grad(adif, sg) + divA_d
    em["current"] = -2.0 * E - E * asum - 2.0 * eps * bxB
    if apply_L is not None:
        Lf = apply_L(f)
        cur = cur + velocity_flux(Lf.plus - Lf.minus, vg)
    if gamma is not None:
        Gm = gamma(f)
        cur = cur - velocity_flux(Gm.plus - Gm.minus, vg)
    out["q:current"] = G
    out["current"] = cur

    # stress law: test (v_i v_j − δ_ij) μ^{1/2} on s
    phi = (np.einsum("i...,j...->ij...", vv, vv) - np.eye(3)[:, :, None, None, None]) * sm
    flux3 = _vquad_lead(vv[:, None, None] * phi[None], s, vg)  # (k, i, j, *S)
    stress = np.stack([np.stack([_div(flux3[:, i, j], sg) for j in range(3)]) for i in range(3)])
    Bfield = Btot if Btot.ndim > 1 else Btot.reshape(3, *([1] * sg.dim))
    Bx = np.broadcast_to(Bfield, (3,) + sg.shape)
    # (v×B)_i as a phase-space field
    vxB_ps = np.stack([
        vv[1] * Bx[2][ex] - vv[2] * Bx[1][ex],
        vv[2] * Bx[0][ex] - vv[0] * Bx[2][ex],
        vv[0] * Bx[1][ex] - vv[1] * Bx[0][ex],
    ])
    Gd = velocity_flux(d, vg)
    fstress = np.empty((3, 3) + sg.shape)
    for i in range(3):
        for j in range(3):
            mag = vv[j] * vxB_ps[i] + vv[i] * vxB_ps[j]
            fstress[i, j] = E[i] * Gd[j] + E[j] * Gd[i] + eps * np.sum(mag * sm * d, axis=VAXES) * vg.cell
    em["stress"] = -fstress
    law = stress
    if apply_L is not None:
        Lf = apply_L(f)
        law = law + _vquad_lead(phi, Lf.plus + Lf.minus, vg)
    if gamma is not None:
        Gm = gamma(f)
        law = law - _vquad_lead(phi, Gm.plus + Gm.minus, vg)
    out["q:stress"] = moment_A(s, vg)
    out["stress"] = law

    # heat-flux law: test (|v|² − 5) v_j μ^{1/2} / 10 on s
    psi = 0.1 * vv * (vg.speed2 - 5.0) * sm  # (3, n, n, n)
    flux4 = _vquad_lead(vv[:, None] * psi[None], s, vg)  # (k, j, *S)
    hf = np.stack([_div(flux4[:, j], sg) for j in range(3)])
    Ev = sum(E[k][ex] * vv[k] for k in range(3))
    hforce = np.empty((3,) + sg.shape)
    for j in range(3):
        integrand = 0.1 * (2.0 * vv[j] * Ev + (vg.speed2 - 5.0) * (E[j][ex] + eps * vxB_ps[j])) * sm
        hforce[j] = np.sum(integrand * d, axis=VAXES) * vg.cell
    em["heat_flux"] = -hforce
    hlaw = hf
    if apply_L is not None:
        Lf = apply_L(f)
        hlaw = hlaw + _vquad_lead(psi, Lf.plus + Lf.minus, vg)
    if gamma is not None:
        Gm = gamma(f)
        hlaw = hlaw - _vquad_lead(psi, Gm.plus + Gm.minus, vg)
    out["q:heat_flux"] = moment_B(s, vg)
    out["heat_flux"] = hlaw
    if force is not None:
        em = _discrete_em_terms(force(f, E, Btot, eps), vg)
    for name, val in em.items():
        out[name] = out[name] + val
    return out


@dataclass
class BalanceResiduals:
    residuals: dict[str, float]
    scales: dict[str, float]

    def relative(self) -> dict[str, float]:
        return {k: self.residuals[k] / self.scales[k] if self.scales[k] > 0 else self.residuals[k]
                for k in self.residuals}


def macro_residuals(snap0, snap1, dt: float, apply_L: Callable | None = None,
                    gamma: Callable | None = None, laws: Sequence[str] = LAW_NAMES,
                    force: Callable | None = None) -> BalanceResiduals:
    """L² residual of each moment law between two snapshots.

    Each snapshot needs attributes f (PairDistribution) and em (with E, B_tilde,
    B_background, epsilon). ∂_t is the forward difference over dt; every other term
    is averaged over the two snapshots, so residuals are second order in dt. `force`
    swaps the continuum electromagnetic moments for those of a discrete force operator.
    """
    if snap0 is None or snap1 is None:
        raise MissingSnapshotError("two snapshots are required")
    if not dt > 0:
        raise ValueError("dt must be positive")
    terms = []
    for snap in (snap0, snap1):
        em = snap.em
        Btot = np.asarray(em.B_tilde) + np.asarray(em.B_background, dtype=float).reshape(3, *([1] * snap.f.sgrid.dim))
        terms.append(_moment_terms(snap.f, np.asarray(em.E), Btot, em.epsilon, apply_L, gamma, force))
    sg = snap0.f.sgrid
    res, scale = {}, {}
    for name in laws:
        dq = (terms[1]["q:" + name] - terms[0]["q:" + name]) / dt
        rest = 0.5 * (terms[0][name] + terms[1][name])
        res[name] = float(sg.norm(dq + rest))
        scale[name] = float(max(sg.norm(dq), sg.norm(rest)))
    return BalanceResiduals(res, scale)
