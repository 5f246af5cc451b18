"""Electromagnetic perturbation fields: exact per-mode Maxwell propagation, the Poisson
closure, Gauss-law monitoring and compatible initial data.

Fields have shape (3, *spatial). With k = 2πξ the curl is ik×; Nyquist modes have
no well-defined real derivative and are treated as curl- and divergence-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .phase_grid import PairDistribution, SpatialGrid


class FieldError(ValueError):
    pass


class NonNeutralError(FieldError):
    def __init__(self, mean: float):
        super().__init__(f"charge density has nonzero mean {mean:.3e}")
        self.mean = mean


@dataclass
class EMState:
    E: np.ndarray
    B_tilde: np.ndarray
    B_background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    epsilon: float = 1.0

    def __post_init__(self) -> None:
        self.E = np.ascontiguousarray(self.E, dtype=float)
        self.B_tilde = np.ascontiguousarray(self.B_tilde, dtype=float)
        self.B_background = np.asarray(self.B_background, dtype=float).reshape(3)
        if not 0.0 < self.epsilon <= 1.0:
            raise FieldError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.E.shape != self.B_tilde.shape or self.E.shape[0] != 3:
            raise FieldError("E and B_tilde must both have shape (3, *spatial)")

    @classmethod
    def zeros(cls, sgrid: SpatialGrid, B_background=(0.0, 0.0, 0.0), epsilon: float = 1.0) -> "EMState":
        z = np.zeros((3,) + sgrid.shape)
        return cls(z, z.copy(), np.asarray(B_background, dtype=float), epsilon)

    def copy(self) -> "EMState":
        return EMState(self.E.copy(), self.B_tilde.copy(), self.B_background.copy(), self.epsilon)

    def with_fields(self, E: np.ndarray, B_tilde: np.ndarray) -> "EMState":
        return replace(self, E=E, B_tilde=B_tilde)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.E)) and np.all(np.isfinite(self.B_tilde)))

    def total_B(self) -> np.ndarray:
        """𝔅 + B̃ as a (3, *spatial) field."""
        return self.B_tilde + self.B_background.reshape((3,) + (1,) * (self.B_tilde.ndim - 1))

    def energy(self, sgrid: SpatialGrid) -> float:
        return sgrid.norm(self.E) ** 2 + sgrid.norm(self.B_tilde) ** 2


# ---------------------------------------------------------------- spectral vector calculus


def _k(sgrid: SpatialGrid) -> np.ndarray:
    """2πξ with Nyquist modes zeroed, shape (3, *spatial)."""
    k = 2.0 * np.pi * sgrid.xi
    return np.where(sgrid.nyquist_mask[None], 0.0, k)


def _fft3(F: np.ndarray, sgrid: SpatialGrid) -> np.ndarray:
    return np.stack([sgrid.forward(F[i]) for i in range(3)])


def _ifft3(F: np.ndarray, sgrid: SpatialGrid) -> np.ndarray:
    return np.stack([sgrid.inverse(F[i]) for i in range(3)])


def _unit_k(sgrid: SpatialGrid) -> tuple[np.ndarray, np.ndarray]:
    k = _k(sgrid)
    kn = np.sqrt(np.sum(k * k, axis=0))
    safe = np.where(kn > 0, kn, 1.0)
    return k / safe, kn


def divergence(F: np.ndarray, sgrid: SpatialGrid) -> np.ndarray:
    k = _k(sgrid)
    Fh = _fft3(F, sgrid)
    return sgrid.inverse(np.sum(1j * k * Fh, axis=0))


def curl(F: np.ndarray, sgrid: SpatialGrid) -> np.ndarray:
    k = _k(sgrid)
    Fh = _fft3(F, sgrid)
    return _ifft3(1j * np.cross(k, Fh, axis=0), sgrid)


def longitudinal_part(F: np.ndarray, sgrid: SpatialGrid) -> np.ndarray:
    """k̂(k̂·F̂) per nonzero mode; the zero mode is excluded."""
    kh, _ = _unit_k(sgrid)
    Fh = _fft3(F, sgrid)
    return _ifft3(kh * np.sum(kh * Fh, axis=0), sgrid)


def charge_density(f: PairDistribution) -> np.ndarray:
    """ρ = ∫ μ^{1/2}(f₊ − f₋) dv."""
    vg = f.vgrid
    return np.tensordot(f.plus - f.minus, vg.sqrt_mu, axes=((-3, -2, -1), (0, 1, 2))) * vg.cell


def current_density(f: PairDistribution) -> np.ndarray:
    """j = ∫ v μ^{1/2}(f₊ − f₋) dv, shape (3, *spatial)."""
    vg = f.vgrid
    w = np.moveaxis(vg.nodes, -1, 0) * vg.sqrt_mu
    return np.tensordot(w, f.plus - f.minus, axes=((1, 2, 3), (-3, -2, -1))) * vg.cell


# ---------------------------------------------------------------- Maxwell


def maxwell_coefficients(kn: np.ndarray, eps: float, dt: float):
    """cos(ωdt), sin(ωdt), sin(ωdt)/ω and (1 − cos(ωdt))/ω with ω = |k|/ε, safe at ω = 0."""
    w = kn / eps
    th = w * dt
    cs = np.cos(th)
    sn = np.sin(th)
    small = th < 1e-8
    wsafe = np.where(small, 1.0, w)
    s_over = np.where(small, dt * (1.0 - th * th / 6.0), sn / wsafe)
    c_over = np.where(small, 0.5 * dt * th, (1.0 - cs) / wsafe)
    return cs, sn, s_over, c_over


def maxwell_substep(em: EMState, current: np.ndarray | None, dt: float, sgrid: SpatialGrid,
                    longitudinal: bool = True) -> EMState:
    """Advance ε∂_tE − ∇×B̃ = −εj, ε∂_tB̃ + ∇×E = 0 exactly over dt with j frozen.

    Transverse modes rotate with frequency |k|/ε and pick up the source by variation
    of constants. The longitudinal and zero-mode parts of E move by −j dt; pass
    longitudinal=False to leave the nonzero longitudinal modes to the caller.
    """
    if not dt > 0:
        raise FieldError(f"dt must be positive, got {dt}")
    kh, kn = _unit_k(sgrid)
    Eh = _fft3(em.E, sgrid)
    Bh = _fft3(em.B_tilde, sgrid)
    jh = np.zeros_like(Eh) if current is None else _fft3(np.asarray(current, dtype=float), sgrid)
    cs, sn, s_over, c_over = maxwell_coefficients(kn, em.epsilon, dt)

    def par(X):
        return kh * np.sum(kh * X, axis=0)

    def J(X):
        return 1j * np.cross(kh, X, axis=0)

    E_par = par(Eh)
    B_par = par(Bh)
    j_par = par(jh)
    E_perp = Eh - E_par
    B_perp = Bh - B_par
    j_perp = jh - j_par
    zero = kn == 0
    # at k = 0 (and Nyquist) everything is "longitudinal": no curl
    if np.any(zero):
        E_par = np.where(zero[None], Eh, E_par)
        E_perp = np.where(zero[None], 0.0, E_perp)
        B_par = np.where(zero[None], Bh, B_par)
        B_perp = np.where(zero[None], 0.0, B_perp)
        j_par = np.where(zero[None], jh, j_par)
        j_perp = np.where(zero[None], 0.0, j_perp)
    E_new = cs * E_perp + sn * J(B_perp) - s_over * j_perp
    B_new = cs * B_perp - sn * J(E_perp) + c_over * J(j_perp)
    if longitudinal:
        E_new = E_new + E_par - dt * j_par
    else:
        # streaming cannot move the k = 0 and Nyquist modes, so they still take −j dt here
        E_new = E_new + E_par - dt * np.where(zero[None], j_par, 0.0)
    B_new = B_new + B_par
    return em.with_fields(_ifft3(E_new, sgrid), _ifft3(B_new, sgrid))


def mode_propagator(k: np.ndarray, eps: float, dt: float) -> np.ndarray:
    """6×6 homogeneous update of (Ê, B̂) for one wavevector k (diagnostic)."""
    k = np.asarray(k, dtype=float)
    kn = float(np.linalg.norm(k))
    M = np.zeros((6, 6), dtype=complex)
    if kn == 0.0:
        return np.eye(6, dtype=complex)
    kh = k / kn
    Pp = np.outer(kh, kh)
    Pt = np.eye(3) - Pp
    Jm = 1j * np.array([[0, -kh[2], kh[1]], [kh[2], 0, -kh[0]], [-kh[1], kh[0], 0]])
    cs, sn, _, _ = (float(x) for x in maxwell_coefficients(np.array(kn), eps, dt))
    M[:3, :3] = cs * Pt + Pp
    M[:3, 3:] = sn * Jm
    M[3:, :3] = -sn * Jm
    M[3:, 3:] = cs * Pt + Pp
    return M


# ---------------------------------------------------------------- Poisson and constraints


def check_neutral(rho: np.ndarray, tol: float = 1e-10) -> float:
    mean = float(np.mean(rho))
    if abs(mean) > tol * max(1.0, float(np.max(np.abs(rho)))):
        raise NonNeutralError(mean)
    return mean


def poisson_field(rho: np.ndarray, sgrid: SpatialGrid, tol: float = 1e-10) -> np.ndarray:
    """E = ∇φ with Δφ = ρ, so that ∇·E = ρ and ∇×E = 0."""
    check_neutral(rho, tol)
    k = _k(sgrid)
    k2 = np.sum(k * k, axis=0)
    rh = sgrid.forward(rho)
    safe = np.where(k2 > 0, k2, 1.0)
    phih = np.where(k2 > 0, -rh / safe, 0.0)
    return _ifft3(1j * k * phih, sgrid)


def gauss_residual(em: EMState, rho: np.ndarray, sgrid: SpatialGrid, floor: float = 1e-14) -> float:
    """‖∇·E − ρ‖ / max(‖ρ‖, floor)."""
    r = divergence(em.E, sgrid) - rho
    return float(sgrid.norm(r) / max(sgrid.norm(rho), floor))


def enforce_compatibility(f0: PairDistribution, E0: np.ndarray, B0_tilde: np.ndarray,
                          tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Longitudinal E0 from the Poisson field of f0's charge; divergence removed from B̃0."""
    sg = f0.sgrid
    rho = charge_density(f0)
    check_neutral(rho, tol)
    E0 = np.asarray(E0, dtype=float)
    B0 = np.asarray(B0_tilde, dtype=float)
    E_new = E0 - longitudinal_part(E0, sg) + poisson_field(rho, sg, tol)
    B_new = B0 - longitudinal_part(B0, sg)
    return E_new, B_new
