"""Cutoff Boltzmann collision operator on the velocity lattice.

The discrete operator is built from a weak (symmetrized) quadrature. For every
pair (v, u) of lattice nodes and every direction ω of a hemisphere rule, the event
v' = v - ((v-u)·ω)ω, u' = u + ((v-u)·ω)ω is evaluated with a quadratic-exact
interpolation stencil. Pulling the test function back through the same stencil
makes mass, momentum and energy conservation exact for every event, and it makes
the assembled linearized operator exactly symmetric with the collision invariants
in its null space.

Lattice symmetry (the 48 signed axis permutations) is used to loop only over
representative nodes v in the fundamental domain 0 < v1 <= v2 <= v3.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate, linalg

from . import _collision_kernels as _ck
from ._accel import backend_name
from .arrayfile import content_hash, read_arrays, write_arrays
from .phase_grid import MU_NORM, PairDistribution, VelocityGrid

log = logging.getLogger(__name__)

OPERATOR_VERSION = 3

ANGULAR_PROFILES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "hard_sphere": lambda c: np.abs(c),
    "cos_squared": lambda c: c * c,
    "constant": lambda c: np.ones_like(c),
}


class KernelError(ValueError):
    """Invalid collision model or lattice."""


class MemoryBudgetError(KernelError):
    pass


class AsymmetryError(KernelError):
    pass


@dataclass(frozen=True)
class SphereQuadrature:
    """Gauss-Legendre in cosθ on each hemisphere times the trapezoid rule in φ."""

    n_theta: int = 3
    n_phi: int = 8

    def __post_init__(self) -> None:
        if self.n_theta < 1 or self.n_phi < 3:
            raise KernelError("sphere quadrature needs n_theta >= 1 and n_phi >= 3")

    def hemisphere(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nodes c ∈ (0, 1), angles φ, and product weights (n_theta, n_phi)."""
        x, w = np.polynomial.legendre.leggauss(self.n_theta)
        c = 0.5 * (x + 1.0)
        phi = 2.0 * np.pi * np.arange(self.n_phi) / self.n_phi
        wts = np.outer(0.5 * w, np.full(self.n_phi, 2.0 * np.pi / self.n_phi))
        return c, phi, wts

    def directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Full-sphere nodes (M, 3) around the x3 axis and their weights."""
        c, phi, w = self.hemisphere()
        cc = np.concatenate([c, -c])
        ww = np.concatenate([w, w], axis=0)
        s = np.sqrt(1.0 - cc**2)
        d = np.stack([
            s[:, None] * np.cos(phi)[None, :],
            s[:, None] * np.sin(phi)[None, :],
            np.broadcast_to(cc[:, None], (cc.size, phi.size)),
        ], axis=-1)
        return d.reshape(-1, 3), ww.ravel()

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        d, w = self.directions()
        return float(np.sum(w * fn(d)))

    def to_dict(self) -> dict:
        return {"n_theta": self.n_theta, "n_phi": self.n_phi}


@dataclass(frozen=True)
class KernelModel:
    """Collision kernel |v-u|^γ b(cosθ) with cutoff angular profile b.

    angular_profile is either a key of ANGULAR_PROFILES or a callable; callables
    hash by their qualified name, so give them distinct names if you cache.
    """

    gamma: float = 1.0
    angular_profile: str | Callable[[np.ndarray], np.ndarray] = "hard_sphere"
    grad_constant: float = 1.0
    sphere: SphereQuadrature = field(default_factory=SphereQuadrature)
    cross_section_scale: float = 1.0
    mu_floor: float = 1e-280
    memory_budget_bytes: float = 4e9

    def __post_init__(self) -> None:
        if self.gamma <= -3.0:
            raise KernelError(f"gamma={self.gamma}: collision frequency integral diverges for gamma <= -3")
        if self.gamma > 1.0:
            raise KernelError(f"gamma={self.gamma} outside (-3, 1]")
        if isinstance(self.angular_profile, str) and self.angular_profile not in ANGULAR_PROFILES:
            raise KernelError(f"unknown angular profile {self.angular_profile!r}")

    def b(self, c) -> np.ndarray:
        fn = ANGULAR_PROFILES[self.angular_profile] if isinstance(self.angular_profile, str) else self.angular_profile
        return np.asarray(fn(np.asarray(c, dtype=float)), dtype=float)

    def b_even(self, c) -> np.ndarray:
        """b(c) + b(-c): ω and -ω give the same collision, so only this enters."""
        return self.b(c) + self.b(-np.asarray(c, dtype=float))

    def grad_bound_violations(self) -> int:
        """Number of sphere nodes where 0 <= b(c) <= C|c| fails."""
        d, _ = self.sphere.directions()
        c = d[:, 2]
        b = self.b(c)
        bad = (b < 0.0) | (b > self.grad_constant * np.abs(c) * (1.0 + 1e-12))
        return int(np.count_nonzero(bad))

    def angular_integral(self) -> float:
        """∫_{S²} b(ω·e) dω = 2π ∫_{-1}^{1} b(c) dc."""
        val, _ = integrate.quad(lambda c: float(self.b(np.array([c]))[0]), -1.0, 1.0, points=[0.0])
        return 2.0 * np.pi * val

    def to_dict(self) -> dict:
        prof = self.angular_profile
        if not isinstance(prof, str):
            prof = f"callable:{getattr(prof, '__module__', '')}.{getattr(prof, '__qualname__', repr(prof))}"
        return {
            "gamma": self.gamma,
            "angular_profile": prof,
            "grad_constant": self.grad_constant,
            "sphere": self.sphere.to_dict(),
            "cross_section_scale": self.cross_section_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelModel":
        sph = d.get("sphere", {})
        return cls(
            gamma=float(d.get("gamma", 1.0)),
            angular_profile=d.get("angular_profile", "hard_sphere"),
            grad_constant=float(d.get("grad_constant", 1.0)),
            sphere=SphereQuadrature(int(sph.get("n_theta", 3)), int(sph.get("n_phi", 8))),
            cross_section_scale=float(d.get("cross_section_scale", 1.0)),
            mu_floor=float(d.get("mu_floor", 1e-280)),
            memory_budget_bytes=float(d.get("memory_budget_bytes", 4e9)),
        )


# ---------------------------------------------------------------- collision frequency


def _nu_radial(speed: float, gamma: float) -> float:
    """∫_{R³} |z|^γ μ(v - z) dz at |v| = speed."""
    if speed < 1e-12:
        val, _ = integrate.quad(lambda r: r ** (gamma + 2.0) * math.exp(-0.5 * r * r), 0.0, np.inf)
        return MU_NORM * 4.0 * np.pi * val

    def f(r: float) -> float:
        # sphere average of μ(v - rσ), written to avoid overflow
        a = math.exp(-0.5 * (speed - r) ** 2) * -math.expm1(-2.0 * speed * r)
        return r ** (gamma + 1.0) * a / speed

    lo, _ = integrate.quad(f, 0.0, speed, limit=200, epsabs=0.0, epsrel=1e-13)
    hi, _ = integrate.quad(f, speed, speed + 40.0, limit=200, epsabs=0.0, epsrel=1e-13)
    val = lo + hi
    return MU_NORM * 2.0 * np.pi * val


def collision_frequency(v, model: KernelModel) -> np.ndarray | float:
    """ν(v) = 2∫∫|v-u|^γ b(ω·(v-u)/|v-u|) μ(u) dω du, accepting (..., 3) arrays."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise KernelError("velocity must have a trailing axis of length 3")
    speeds = np.sqrt(np.sum(v * v, axis=-1))
    key = np.round(speeds, 12)
    uniq, inv = np.unique(key.ravel(), return_inverse=True)
    pref = 2.0 * model.cross_section_scale * model.angular_integral()
    vals = np.array([pref * _nu_radial(float(s), model.gamma) for s in uniq])
    out = vals[inv].reshape(speeds.shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- lattice symmetry


def lattice_group(n: int) -> list[tuple[tuple[int, int, int], tuple[bool, bool, bool]]]:
    """The 48 signed axis permutations as (perm, flips)."""
    return [(p, s) for p in itertools.permutations(range(3)) for s in itertools.product((False, True), repeat=3)]


def group_index_maps(n: int) -> np.ndarray:
    """gmap[g, i] = flat index of the image of node i under group element g."""
    idx = np.indices((n, n, n)).reshape(3, -1)
    maps = []
    for perm, flips in lattice_group(n):
        new = [idx[perm[a]] for a in range(3)]
        new = [n - 1 - new[a] if flips[a] else new[a] for a in range(3)]
        maps.append((new[0] * n + new[1]) * n + new[2])
    return np.ascontiguousarray(np.array(maps, dtype=np.int64))


def representative_pairs(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairs (v, u) with v in the fundamental domain, u any other node, and 1/|Stab(v)| weights."""
    half = range(n // 2, n)
    rv, rw = [], []
    for i, j, k in itertools.combinations_with_replacement(half, 3):
        stab = 6 // len(set(itertools.permutations((i, j, k))))
        rv.append((i * n + j) * n + k)
        rw.append(1.0 / stab)
    N = n**3
    rv = np.repeat(np.asarray(rv, dtype=np.int64), N)
    ru = np.tile(np.arange(N, dtype=np.int64), len(rw))
    rw = np.repeat(np.asarray(rw), N)
    keep = rv != ru
    return rv[keep], ru[keep], rw[keep]


def symmetrize_group(a: np.ndarray, n: int) -> np.ndarray:
    """Σ_g T_g a T_gᵀ over the 48 signed permutations, for a (n³, n³) matrix."""
    a6 = a.reshape((n,) * 6)
    for ax in range(3):
        a6 = a6 + a6[tuple(slice(None, None, -1) if k in (ax, ax + 3) else slice(None) for k in range(6))]
    out = np.zeros_like(a6)
    for p in itertools.permutations(range(3)):
        out += a6.transpose(p + tuple(q + 3 for q in p))
    return out.reshape(n**3, n**3)


def _quadrature_arrays(model: KernelModel):
    c, phi, w = model.sphere.hemisphere()
    wq = model.cross_section_scale * model.b_even(c)[:, None] * w
    return c, np.cos(phi), np.sin(phi), np.ascontiguousarray(wq)


# ---------------------------------------------------------------- linearized operator


@dataclass(eq=False)
class LinearizedOperator:
    """L = ν - K on the lattice, stored as the sum and difference blocks.

    For s = f₊ + f₋ and d = f₊ - f₋ one has (L₊f + L₋f) = L_sum s and
    (L₊f - L₋f) = L_diff d.
    """

    vgrid: VelocityGrid
    model: KernelModel
    nu: np.ndarray
    L_sum: np.ndarray
    L_diff: np.ndarray
    key: str = ""
    asymmetry: float = 0.0
    build_seconds: float = 0.0
    _decay: dict = field(default_factory=dict, repr=False)
    _eig: dict = field(default_factory=dict, repr=False)
    cache_dir: Path | None = None

    @property
    def L_same(self) -> np.ndarray:
        return 0.5 * (self.L_sum + self.L_diff)

    @property
    def L_cross(self) -> np.ndarray:
        return 0.5 * (self.L_sum - self.L_diff)

    @cached_property
    def K_same(self) -> np.ndarray:
        return np.diag(self.nu) - self.L_same

    @cached_property
    def K_cross(self) -> np.ndarray:
        return -self.L_cross

    def null_basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Lattice vectors spanning the null space of L_sum (5) and L_diff (1), as columns."""
        vg = self.vgrid
        sm = vg.sqrt_mu.ravel()
        v = vg.flat_nodes
        s = np.stack([sm, v[:, 0] * sm, v[:, 1] * sm, v[:, 2] * sm, vg.speed2.ravel() * sm], axis=1)
        return s, sm[:, None]

    def eigen(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        """Cached eigen-decomposition of the sum ("s") or difference ("d") block."""
        if which not in self._eig:
            path = None if self.cache_dir is None else self.cache_dir / f"eig_{which}_{self.key[:16]}.ckpt"
            if path is not None and path.exists():
                arrs, meta = read_arrays(path)
                if meta.get("key") == self.key:
                    self._eig[which] = (arrs["w"], arrs["V"])
            if which not in self._eig:
                mat = self.L_sum if which == "s" else self.L_diff
                w, V = linalg.eigh(mat, check_finite=False)
                self._eig[which] = (w, V)
                if path is not None:
                    write_arrays(path, {"w": w, "V": V}, {"key": self.key, "block": which})
        return self._eig[which]

    def decay(self, h: float) -> tuple[np.ndarray, np.ndarray]:
        """exp(-h L_sum), exp(-h L_diff), cached per step size."""
        key = float(h)
        if key not in self._decay:
            mats = []
            for which in ("s", "d"):
                w, V = self.eigen(which)
                mats.append((V * np.exp(-h * w)) @ V.T)
            self._decay[key] = tuple(mats)
        return self._decay[key]

    def phi1(self, h: float) -> tuple[np.ndarray, np.ndarray]:
        """h·φ₁(-hL) = ∫₀^h exp(-sL) ds for each block, cached per step size."""
        key = ("phi1", float(h))
        if key not in self._decay:
            mats = []
            for which in ("s", "d"):
                w, V = self.eigen(which)
                x = h * w
                g = np.where(np.abs(x) > 1e-8, -np.expm1(-x) / np.where(x == 0, 1.0, w), h * (1.0 - 0.5 * x))
                mats.append((V * g) @ V.T)
            self._decay[key] = tuple(mats)
        return self._decay[key]


def operator_key(vgrid: VelocityGrid, model: KernelModel) -> str:
    return content_hash({"version": OPERATOR_VERSION, "grid": vgrid.to_dict(), "model": model.to_dict()})


def _assemble_blocks(vgrid: VelocityGrid, model: KernelModel) -> tuple[np.ndarray, np.ndarray]:
    n = vgrid.n_v
    N = vgrid.size
    rv, ru, rw = representative_pairs(n)
    c, cphi, sphi, wq = _quadrature_arrays(model)
    As = np.zeros((N, N))
    Ad = np.zeros((N, N))
    _ck.assemble(rv, ru, rw, np.ascontiguousarray(vgrid.flat_nodes), np.ascontiguousarray(vgrid.mu.ravel()),
                 float(vgrid.axis[0]), vgrid.dv, n, float(model.gamma), c, cphi, sphi, wq, As, Ad)
    As = symmetrize_group(As, n)
    Ad = symmetrize_group(Ad, n)
    return As, Ad


def build_linearized(vgrid: VelocityGrid, model: KernelModel | None = None, cache_dir: str | Path | None = None,
                     symmetry_tol: float = 1e-10) -> LinearizedOperator:
    """Assemble (or load from cache) the linearized two-species operator."""
    model = model or KernelModel()
    N = vgrid.size
    need = 6.0 * N * N * 8
    if need > model.memory_budget_bytes:
        raise MemoryBudgetError(f"dense operator needs ~{need / 1e9:.2f} GB, budget {model.memory_budget_bytes / 1e9:.2f} GB")
    key = operator_key(vgrid, model)
    cdir = Path(cache_dir) if cache_dir is not None else None
    path = None if cdir is None else cdir / f"linop_{key[:16]}.ckpt"
    if path is not None and path.exists():
        arrs, meta = read_arrays(path)
        if meta.get("key") == key:
            log.info("collision operator cache hit %s", path)
            return LinearizedOperator(vgrid, model, arrs["nu"], arrs["L_sum"], arrs["L_diff"], key=key,
                                      asymmetry=float(meta.get("asymmetry", 0.0)), cache_dir=cdir)
        log.warning("cache file %s has a foreign key, rebuilding", path)

    t0 = time.perf_counter()
    As, Ad = _assemble_blocks(vgrid, model)
    scale = 1.0 / (vgrid.cell * np.outer(vgrid.sqrt_mu.ravel(), vgrid.sqrt_mu.ravel()))
    L_sum = As * scale
    del As
    L_diff = Ad * scale
    del Ad, scale
    asym = max(_relative_asymmetry(L_sum), _relative_asymmetry(L_diff))
    if asym > symmetry_tol:
        raise AsymmetryError(f"assembled operator asymmetric: relative defect {asym:.3e} > {symmetry_tol:.1e}")
    nu = collision_frequency(vgrid.flat_nodes, model)
    op = LinearizedOperator(vgrid, model, nu, L_sum, L_diff, key=key, asymmetry=asym,
                            build_seconds=time.perf_counter() - t0, cache_dir=cdir)
    log.info("collision operator n_v=%d built in %.1fs (%s)", vgrid.n_v, op.build_seconds, backend_name())
    if path is not None:
        write_arrays(path, {"nu": nu, "L_sum": L_sum, "L_diff": L_diff},
                     {"key": key, "asymmetry": asym, "grid": vgrid.to_dict(), "model": model.to_dict()})
    return op


def _relative_asymmetry(a: np.ndarray) -> float:
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - a.T))) / scale


def _check_op(f: PairDistribution, op: LinearizedOperator) -> None:
    if f.vgrid != op.vgrid:
        raise KernelError("distribution and operator live on different velocity lattices")


def apply_blocks(s: np.ndarray, d: np.ndarray, op: LinearizedOperator) -> tuple[np.ndarray, np.ndarray]:
    """(L_sum s, L_diff d) for arrays with trailing lattice axes."""
    N = op.vgrid.size
    shape = s.shape
    ls = (s.reshape(-1, N) @ op.L_sum).reshape(shape)
    ld = (d.reshape(-1, N) @ op.L_diff).reshape(shape)
    return ls, ld


def apply_L(f: PairDistribution, op: LinearizedOperator) -> PairDistribution:
    """Two-species L at every spatial point."""
    _check_op(f, op)
    ls, ld = apply_blocks(f.s, f.d, op)
    return f.like(0.5 * (ls + ld), 0.5 * (ls - ld))


def dirichlet_form(f: PairDistribution, op: LinearizedOperator) -> float:
    """⟨f, Lf⟩ in the lattice inner product (sum over x and v with cell weights)."""
    return f.inner(apply_L(f, op))


# ---------------------------------------------------------------- nonlinear operator


@dataclass
class QuadratureTables:
    """Event tables shared by every evaluation of Q on one lattice."""

    vgrid: VelocityGrid
    model: KernelModel

    @cached_property
    def reps(self):
        return representative_pairs(self.vgrid.n_v)

    @cached_property
    def gmap(self) -> np.ndarray:
        return group_index_maps(self.vgrid.n_v)

    @cached_property
    def quad(self):
        return _quadrature_arrays(self.model)


_TABLES: dict[tuple, QuadratureTables] = {}


def _tables(vgrid: VelocityGrid, model: KernelModel) -> QuadratureTables:
    k = (vgrid, operator_key(vgrid, model))
    if k not in _TABLES:
        _TABLES[k] = QuadratureTables(vgrid, model)
    return _TABLES[k]


def collision_sum(hF: np.ndarray, hG: np.ndarray, vgrid: VelocityGrid, model: KernelModel) -> np.ndarray:
    """Q(μ hF, μ hG) for a batch (B, N) of lattice functions given as ratios to μ."""
    hF = np.ascontiguousarray(np.atleast_2d(hF), dtype=float)
    hG = np.ascontiguousarray(np.atleast_2d(hG), dtype=float)
    if hF.shape != hG.shape or hF.shape[1] != vgrid.size:
        raise KernelError("collision arguments do not match the lattice")
    tab = _tables(vgrid, model)
    rv, ru, rw = tab.reps
    c, cphi, sphi, wq = tab.quad
    out = np.zeros_like(hF)
    _ck.collide(rv, ru, rw, np.ascontiguousarray(vgrid.flat_nodes), np.ascontiguousarray(vgrid.mu.ravel()),
                float(vgrid.axis[0]), vgrid.dv, vgrid.n_v, float(model.gamma), c, cphi, sphi, wq, tab.gmap,
                hF, hG, out)
    return out / vgrid.cell


def boltzmann_q(F: np.ndarray, G: np.ndarray, vgrid: VelocityGrid, model: KernelModel | None = None) -> np.ndarray:
    """Q(F, G) for lattice functions of shape (..., n_v, n_v, n_v)."""
    model = model or KernelModel()
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    if F.shape != G.shape or F.shape[-3:] != vgrid.shape:
        raise KernelError(f"lattice mismatch: {F.shape} vs {G.shape} on {vgrid.shape}")
    mu = vgrid.mu.ravel()
    N = vgrid.size
    out = collision_sum(F.reshape(-1, N) / mu, G.reshape(-1, N) / mu, vgrid, model)
    return out.reshape(F.shape)


@dataclass
class GammaResult:
    value: PairDistribution
    floored: int


def gamma_bilinear(g: PairDistribution, h: PairDistribution, model: KernelModel | None = None,
                   return_floored: bool = False):
    """Γ±(g, h) = μ^{-1/2} Q(μ^{1/2} g±, μ^{1/2}(h₊ + h₋)).

    Nodes with μ below model.mu_floor are zeroed in the output and counted.
    """
    model = model or KernelModel()
    g.check_grid(h)
    vg = g.vgrid
    N = vg.size
    sm = vg.sqrt_mu.ravel()
    floor = vg.mu.ravel() < model.mu_floor
    inv = np.where(floor, 0.0, 1.0 / np.where(floor, 1.0, sm))
    hs = (h.plus + h.minus).reshape(-1, N) * inv
    hF = np.concatenate([g.plus.reshape(-1, N) * inv, g.minus.reshape(-1, N) * inv])
    hG = np.concatenate([hs, hs])
    q = collision_sum(hF, hG, vg, model) * inv
    M = hs.shape[0]
    out = g.like(q[:M].reshape(g.plus.shape), q[M:].reshape(g.plus.shape))
    nfloor = int(np.count_nonzero(floor)) * M * 2
    if return_floored:
        return GammaResult(out, nfloor)
    return out


# ---------------------------------------------------------------- coercivity


@dataclass
class CoercivityReport:
    sigma0: float
    sigma0_sum: float
    sigma0_diff: float
    rayleigh_min: float
    n_random: int
    min_form: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _block_gap(L: np.ndarray, nu: np.ndarray, basis: np.ndarray) -> float:
    """min ⟨f, L f⟩ / ⟨f, ν f⟩ over f orthogonal to the columns of basis.

    With g = ν^{1/2} f this is the smallest eigenvalue of ν^{-1/2} L ν^{-1/2} on the
    orthogonal complement of ν^{-1/2}·basis; the complement's partner is shifted
    out of the way and one dense eigenvalue is extracted.
    """
    r = 1.0 / np.sqrt(nu)
    M = L * r[:, None]
    M *= r[None, :]
    W, _ = np.linalg.qr(basis * r[:, None])
    MW = M @ W
    # ΠMΠ with Π = I - WWᵀ, plus a shift on span(W)
    M -= MW @ W.T
    M -= W @ (W.T @ M)
    shift = 1.0 + float(np.max(np.abs(np.diag(M))))
    M += shift * (W @ W.T)
    M = 0.5 * (M + M.T)
    val = linalg.eigh(M, eigvals_only=True, subset_by_index=[0, 0], driver="evr", check_finite=False)
    return float(val[0])


def coercivity(op: LinearizedOperator, n_random: int = 1000, seed: int = 0) -> CoercivityReport:
    """Measured σ₀ with ⟨f, Lf⟩ >= σ₀ ‖{I-P}f‖²_ν.

    σ₀ is the smaller of the generalized spectral gaps of the two blocks. The
    minimum Rayleigh quotient over random microscopic f is reported alongside.
    """
    bs, bd = op.null_basis()
    nu = op.nu
    gs = _block_gap(op.L_sum, nu, bs)
    gd = _block_gap(op.L_diff, nu, bd)
    rng = np.random.default_rng(seed)
    N = op.vgrid.size
    Qs, _ = np.linalg.qr(bs)
    Qd, _ = np.linalg.qr(bd)
    S = rng.standard_normal((n_random, N))
    D = rng.standard_normal((n_random, N))
    S -= (S @ Qs) @ Qs.T
    D -= (D @ Qd) @ Qd.T
    num = np.einsum("ij,ij->i", S @ op.L_sum, S) + np.einsum("ij,ij->i", D @ op.L_diff, D)
    den = np.einsum("ij,ij->i", S * nu, S) + np.einsum("ij,ij->i", D * nu, D)
    ratio = num / den
    return CoercivityReport(
        sigma0=min(gs, gd), sigma0_sum=gs, sigma0_diff=gd,
        rayleigh_min=float(np.min(ratio)), n_random=n_random, min_form=float(np.min(num)),
    )


def null_space_residuals(op: LinearizedOperator) -> np.ndarray:
    """Relative residual ‖L e‖ / (‖ν e‖) for the six collision invariants."""
    vg = op.vgrid
    sm = vg.sqrt_mu.ravel()
    v = vg.flat_nodes
    zero = np.zeros_like(sm)
    vecs = [(sm, zero), (zero, sm)]
    for i in range(3):
        vecs.append((v[:, i] * sm, v[:, i] * sm))
    vecs.append((vg.speed2.ravel() * sm, vg.speed2.ravel() * sm))
    out = []
    for p, m in vecs:
        ls, ld = apply_blocks(p + m, p - m, op)
        lp, lm = 0.5 * (ls + ld), 0.5 * (ls - ld)
        ref = np.sqrt(np.sum((op.nu * p) ** 2) + np.sum((op.nu * m) ** 2))
        out.append(np.sqrt(np.sum(lp**2) + np.sum(lm**2)) / ref)
    return np.array(out)
