"""Discrete phase space: periodic spatial grid, midpoint velocity lattice, two-species fields.

Array layout: a single-species grid function has shape ``(*spatial_shape, n_v, n_v, n_v)``;
the three trailing axes are the velocity components. Vector fields (E, B) have shape
``(3, *spatial_shape)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Union

import numpy as np

MAX_X_ORDER = 3
MU_NORM = (2.0 * np.pi) ** -1.5


class GridError(ValueError):
    """Raised on inconsistent or mismatched grids."""


def maxwellian(v) -> np.ndarray | float:
    """Global Maxwellian (2π)^{-3/2} exp(-|v|²/2); ``v`` has a trailing axis of length 3."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("velocity must be finite")
    out = MU_NORM * np.exp(-0.5 * np.sum(v * v, axis=-1))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid on a torus of ``dim`` active axes."""

    dim: int = 1
    lengths: tuple[float, ...] = (2.0 * np.pi,)
    n_per_axis: tuple[int, ...] = (32,)

    def __post_init__(self) -> None:
        if self.dim not in (1, 2, 3):
            raise GridError(f"dim must be 1, 2 or 3, got {self.dim}")
        object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))
        object.__setattr__(self, "n_per_axis", tuple(int(n) for n in self.n_per_axis))
        if len(self.lengths) != self.dim or len(self.n_per_axis) != self.dim:
            raise GridError("lengths and n_per_axis must have one entry per active axis")
        for n in self.n_per_axis:
            if n < 4 or n % 2:
                raise GridError(f"points per axis must be even and >= 4, got {n}")
        for length in self.lengths:
            if not length > 0:
                raise GridError("period lengths must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_per_axis

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(self.dim))

    @property
    def size(self) -> int:
        return int(np.prod(self.n_per_axis))

    @property
    def cell_volume(self) -> float:
        return float(np.prod([L / n for L, n in zip(self.lengths, self.n_per_axis)]))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def coords(self, axis: int) -> np.ndarray:
        n, L = self.n_per_axis[axis], self.lengths[axis]
        return np.arange(n) * (L / n)

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*[self.coords(a) for a in self.axes], indexing="ij"))

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Frequencies ξ per axis for the convention exp(2πi x·ξ)."""
        return tuple(np.fft.fftfreq(n, d=L / n) for L, n in zip(self.lengths, self.n_per_axis))

    @cached_property
    def xi(self) -> np.ndarray:
        """Mode frequency vectors, shape (3, *shape); inactive components are zero."""
        grids = np.meshgrid(*self.wavenumbers, indexing="ij")
        out = np.zeros((3,) + self.shape)
        for a, g in enumerate(grids):
            out[a] = g
        return out

    @cached_property
    def xi_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.xi**2, axis=0))

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True on modes carrying a Nyquist frequency on some axis."""
        mask = np.zeros(self.shape, dtype=bool)
        for a, n in enumerate(self.n_per_axis):
            idx = [slice(None)] * self.dim
            idx[a] = n // 2
            mask[tuple(idx)] = True
        return mask

    def forward(self, g: np.ndarray) -> np.ndarray:
        return np.fft.fftn(g, axes=self.axes)

    def inverse(self, g_hat: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(g_hat, axes=self.axes).real

    def integrate(self, g: np.ndarray) -> np.ndarray:
        """∫ g dx over the torus (sums the leading spatial axes)."""
        return np.sum(g, axis=self.axes) * self.cell_volume

    def norm(self, g: np.ndarray) -> float:
        """L² norm over the torus; any trailing axes are summed without weights."""
        return float(np.sqrt(np.sum(np.asarray(g) ** 2) * self.cell_volume))

    def spectral_norm(self, g: np.ndarray) -> float:
        """Same norm computed from transform coefficients (Parseval)."""
        g_hat = self.forward(g)
        return float(np.sqrt(np.sum(np.abs(g_hat) ** 2) * self.cell_volume / self.size))

    def to_dict(self) -> dict:
        return {"dim": self.dim, "lengths": list(self.lengths), "n_per_axis": list(self.n_per_axis)}

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialGrid":
        return cls(int(d["dim"]), tuple(d["lengths"]), tuple(d["n_per_axis"]))


@dataclass(frozen=True)
class VelocityGrid:
    """Midpoint lattice on [-v_max, v_max]³ with nodes at -v_max + (k+½)Δv."""

    v_max: float = 6.0
    n_v: int = 16
    tol_mass: float = 1e-8

    def __post_init__(self) -> None:
        if self.n_v < 2 or self.n_v % 2:
            raise GridError(f"n_v must be even and >= 2, got {self.n_v}")
        if not self.v_max > 0:
            raise GridError("v_max must be positive")

    @property
    def dv(self) -> float:
        return 2.0 * self.v_max / self.n_v

    @property
    def cell(self) -> float:
        return self.dv**3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_v,) * 3

    @property
    def size(self) -> int:
        return self.n_v**3

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.v_max + (np.arange(self.n_v) + 0.5) * self.dv

    @cached_property
    def nodes(self) -> np.ndarray:
        """Velocities, shape (n_v, n_v, n_v, 3)."""
        g = np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")
        return np.stack(g, axis=-1)

    @cached_property
    def flat_nodes(self) -> np.ndarray:
        return self.nodes.reshape(-1, 3)

    @cached_property
    def speed2(self) -> np.ndarray:
        return np.sum(self.nodes**2, axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        return np.full(self.shape, self.cell)

    @cached_property
    def mu(self) -> np.ndarray:
        return MU_NORM * np.exp(-0.5 * self.speed2)

    @cached_property
    def sqrt_mu(self) -> np.ndarray:
        return MU_NORM**0.5 * np.exp(-0.25 * self.speed2)

    @cached_property
    def bracket(self) -> np.ndarray:
        """⟨v⟩ = (1 + |v|²)^{1/2}."""
        return np.sqrt(1.0 + self.speed2)

    def mass_defect(self) -> float:
        return 1.0 - float(np.sum(self.mu) * self.cell)

    def check_mass(self) -> None:
        m = float(np.sum(self.mu) * self.cell)
        if not (1.0 - self.tol_mass <= m <= 1.0 + 1e-15):
            raise GridError(f"lattice Maxwellian mass {m!r} outside [1 - {self.tol_mass}, 1]")

    def to_dict(self) -> dict:
        return {"v_max": self.v_max, "n_v": self.n_v, "tol_mass": self.tol_mass}

    @classmethod
    def from_dict(cls, d: dict) -> "VelocityGrid":
        return cls(float(d["v_max"]), int(d["n_v"]), float(d.get("tol_mass", 1e-8)))


@dataclass
class PairDistribution:
    """Two-species perturbation f = [f₊, f₋] on spatial grid × velocity lattice."""

    plus: np.ndarray
    minus: np.ndarray
    sgrid: SpatialGrid
    vgrid: VelocityGrid = field(repr=False)

    def __post_init__(self) -> None:
        shape = self.sgrid.shape + self.vgrid.shape
        # contiguous storage keeps reductions bitwise stable across checkpoint reloads
        self.plus = np.ascontiguousarray(self.plus, dtype=float)
        self.minus = np.ascontiguousarray(self.minus, dtype=float)
        if self.plus.shape != shape or self.minus.shape != shape:
            raise GridError(f"species arrays must have shape {shape}")

    @classmethod
    def zeros(cls, sgrid: SpatialGrid, vgrid: VelocityGrid) -> "PairDistribution":
        shape = sgrid.shape + vgrid.shape
        return cls(np.zeros(shape), np.zeros(shape), sgrid, vgrid)

    @classmethod
    def from_species(cls, plus, minus, sgrid, vgrid) -> "PairDistribution":
        """Broadcast species arrays (e.g. velocity-only profiles) to the full shape."""
        shape = sgrid.shape + vgrid.shape
        return cls(np.broadcast_to(plus, shape).copy(), np.broadcast_to(minus, shape).copy(), sgrid, vgrid)

    @classmethod
    def from_sum_diff(cls, s, d, sgrid, vgrid) -> "PairDistribution":
        return cls(0.5 * (s + d), 0.5 * (s - d), sgrid, vgrid)

    def same_grid(self, other: "PairDistribution") -> bool:
        return self.sgrid == other.sgrid and self.vgrid == other.vgrid

    def check_grid(self, other: "PairDistribution") -> None:
        if not self.same_grid(other):
            raise GridError("distributions live on different grids")

    def copy(self) -> "PairDistribution":
        return PairDistribution(self.plus.copy(), self.minus.copy(), self.sgrid, self.vgrid)

    def like(self, plus, minus) -> "PairDistribution":
        return PairDistribution(plus, minus, self.sgrid, self.vgrid)

    @property
    def s(self) -> np.ndarray:
        return self.plus + self.minus

    @property
    def d(self) -> np.ndarray:
        return self.plus - self.minus

    def swapped(self) -> "PairDistribution":
        return self.like(self.minus.copy(), self.plus.copy())

    def __add__(self, other: "PairDistribution") -> "PairDistribution":
        self.check_grid(other)
        return self.like(self.plus + other.plus, self.minus + other.minus)

    def __sub__(self, other: "PairDistribution") -> "PairDistribution":
        self.check_grid(other)
        return self.like(self.plus - other.plus, self.minus - other.minus)

    def __mul__(self, a: float) -> "PairDistribution":
        return self.like(a * self.plus, a * self.minus)

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.plus)) and np.all(np.isfinite(self.minus)))

    def inner(self, other: "PairDistribution") -> float:
        """Phase-space inner product summed over both species."""
        self.check_grid(other)
        w = self.sgrid.cell_volume * self.vgrid.cell
        return float((np.vdot(self.plus, other.plus) + np.vdot(self.minus, other.minus)) * w)

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))


TestSpec = Union[str, np.ndarray, Callable[[np.ndarray], np.ndarray]]


def _test_values(test: TestSpec, vgrid: VelocityGrid) -> np.ndarray:
    if isinstance(test, str):
        key = test.replace(" ", "")
        nodes = vgrid.nodes
        table = {
            "1": lambda: np.ones(vgrid.shape),
            "v1": lambda: nodes[..., 0],
            "v2": lambda: nodes[..., 1],
            "v3": lambda: nodes[..., 2],
            "|v|^2": lambda: vgrid.speed2,
            "|v|2": lambda: vgrid.speed2,
        }
        if key not in table:
            raise ValueError(f"unknown test function tag {test!r}")
        return table[key]()
    if callable(test):
        return np.asarray(test(vgrid.nodes), dtype=float)
    vals = np.asarray(test, dtype=float)
    if vals.shape != vgrid.shape:
        raise GridError(f"test values must have shape {vgrid.shape}")
    return vals


def velocity_moment(f, vgrid: VelocityGrid, test: TestSpec = "1"):
    """Σ Δv³ test(v) f(x, v) over the lattice.

    ``f`` is a PairDistribution (returns the pair of species moments) or an array
    whose trailing three axes are velocity.
    """
    if isinstance(f, PairDistribution):
        if f.vgrid != vgrid:
            raise GridError("distribution lattice differs from the requested lattice")
        return velocity_moment(f.plus, vgrid, test), velocity_moment(f.minus, vgrid, test)
    f = np.asarray(f)
    if f.shape[-3:] != vgrid.shape:
        raise GridError(f"trailing axes {f.shape[-3:]} do not match lattice {vgrid.shape}")
    w = _test_values(test, vgrid) * vgrid.cell
    return np.tensordot(f, w, axes=([-3, -2, -1], [0, 1, 2]))


def spectral_x_derivative(g: np.ndarray, sgrid: SpatialGrid, axis: int, order: int = 1,
                          max_order: int = MAX_X_ORDER) -> np.ndarray:
    """∂^order along a spatial axis via multiplication by (2πiξ)^order per mode.

    Leading axes of ``g`` are spatial; trailing axes pass through. Odd orders drop the
    Nyquist mode so the output stays real.
    """
    if axis not in sgrid.axes:
        raise GridError(f"axis {axis} outside the active dimensions {sgrid.axes}")
    if order < 0 or order > max_order:
        raise ValueError(f"derivative order must lie in [0, {max_order}]")
    if order == 0:
        return np.array(g, dtype=float, copy=True)
    factor = _derivative_factor(sgrid, axis, order)
    g_hat = sgrid.forward(g)
    g_hat *= factor.reshape(factor.shape + (1,) * (g_hat.ndim - sgrid.dim))
    return sgrid.inverse(g_hat)


def _derivative_factor(sgrid: SpatialGrid, axis: int, order: int) -> np.ndarray:
    xi = sgrid.xi[axis]
    factor = (2j * np.pi * xi) ** order
    if order % 2:
        n = sgrid.n_per_axis[axis]
        idx = [slice(None)] * sgrid.dim
        idx[axis] = n // 2
        factor[tuple(idx)] = 0.0
    return factor


@lru_cache(maxsize=64)
def fd_matrix(n: int, order: int, h: float) -> np.ndarray:
    """Second-order accurate finite-difference matrix for d^order/dv^order on n uniform nodes.

    Interior rows use the centered stencil; rows near the ends shift the stencil inward
    (one-sided), keeping the width at order + 2 so accuracy stays second order.
    """
    if order not in (1, 2, 3):
        raise ValueError("velocity derivative order must be 1, 2 or 3")
    half = (order + 1) // 2
    width_c = 2 * half + 1
    width_b = order + 2
    D = np.zeros((n, n))
    for k in range(n):
        if half <= k <= n - 1 - half:
            cols = np.arange(k - half, k - half + width_c)
        elif k < half:
            cols = np.arange(0, width_b)
        else:
            cols = np.arange(n - width_b, n)
        offs = (cols - k).astype(float)
        p = np.arange(len(cols))
        V = offs[None, :] ** p[:, None]
        rhs = np.zeros(len(cols))
        rhs[order] = float(np.prod(np.arange(1, order + 1)))
        D[k, cols] = np.linalg.solve(V, rhs)
    D /= h**order
    D.setflags(write=False)
    return D


def velocity_derivative(g: np.ndarray, vgrid: VelocityGrid, axis: int, order: int = 1) -> np.ndarray:
    """Finite-difference ∂_{v_axis}^order on the trailing velocity axes of ``g``."""
    if axis not in (0, 1, 2):
        raise GridError("velocity axis must be 0, 1 or 2")
    D = fd_matrix(vgrid.n_v, order, vgrid.dv)
    g = np.asarray(g)
    ax = g.ndim - 3 + axis
    out = np.tensordot(g, D, axes=([ax], [1]))
    return np.moveaxis(out, -1, ax)


def multi_indices(n_axes: int, max_total: int, min_total: int = 0) -> list[tuple[int, ...]]:
    """All multi-indices over ``n_axes`` axes with min_total ≤ |index| ≤ max_total, deterministic order."""
    out: list[tuple[int, ...]] = []

    def rec(prefix: tuple[int, ...], remaining: int) -> None:
        if len(prefix) == n_axes:
            if sum(prefix) >= min_total:
                out.append(prefix)
            return
        for k in range(remaining + 1):
            rec(prefix + (k,), remaining - k)

    rec((), max_total)
    out.sort(key=lambda t: (sum(t), tuple(-x for x in t)))
    return out
