from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmblimit.phase_grid import (
    MU_NORM,
    GridError,
    PairDistribution,
    SpatialGrid,
    VelocityGrid,
    fd_matrix,
    maxwellian,
    multi_indices,
    spectral_x_derivative,
    velocity_derivative,
    velocity_moment,
)


def test_maxwellian_closed_form():
    assert maxwellian([0.0, 0.0, 0.0]) == pytest.approx(0.0634936359342410, rel=1e-14)
    assert maxwellian([1.0, 0.0, 0.0]) == pytest.approx((2 * math.pi) ** -1.5 * math.exp(-0.5), rel=1e-15)
    with pytest.raises(ValueError):
        maxwellian([np.nan, 0, 0])


def test_lattice_mass_oracle():
    vg = VelocityGrid(8.0, 32)
    assert abs(np.sum(vg.mu) * vg.cell - 1.0) < 1e-10


def test_lattice_symmetry_and_mu_cache():
    vg = VelocityGrid(6.0, 8)
    ax = vg.axis
    np.testing.assert_array_equal(ax, -ax[::-1])
    assert np.all(ax != 0.0)
    direct = MU_NORM * np.exp(-0.5 * np.sum(vg.nodes**2, axis=-1))
    assert np.max(np.abs(vg.mu / direct - 1.0)) <= 1e-15
    assert np.all(vg.mu > 0)
    np.testing.assert_allclose(vg.sqrt_mu**2, vg.mu, rtol=1e-15)
    VelocityGrid(6.0, 16).check_mass()


def test_mass_budget_violation():
    with pytest.raises(GridError):
        VelocityGrid(2.0, 8, tol_mass=1e-8).check_mass()


@pytest.mark.parametrize("n", [3, 2, 0, 7])
def test_spatial_grid_rejects_bad_sizes(n):
    with pytest.raises(GridError):
        SpatialGrid(1, (1.0,), (n,))


def test_spatial_grid_rejects_bad_dim():
    with pytest.raises(GridError):
        SpatialGrid(4, (1.0,) * 4, (4,) * 4)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_wavenumbers_closed_under_negation(dim):
    sg = SpatialGrid(dim, (1.0,) * dim, (6,) * dim)
    for w in sg.wavenumbers:
        s = set(np.round(w, 12))
        n = len(w)
        # all modes except Nyquist have their negative
        non_nyq = {x for x in s if abs(abs(x) - n / 2) > 1e-9}
        assert {-x for x in non_nyq} <= s


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(1, (8,)), (2, (4, 6)), (3, (4, 4, 4))]))
def test_transform_roundtrip_and_parseval(seed, spec):
    dim, n = spec
    sg = SpatialGrid(dim, tuple(1.0 + i for i in range(dim)), n)
    g = np.random.default_rng(seed).standard_normal(sg.shape)
    back = sg.inverse(sg.forward(g))
    assert np.max(np.abs(back - g)) <= 1e-12 * np.max(np.abs(g))
    assert abs(sg.norm(g) - sg.spectral_norm(g)) <= 1e-12 * sg.norm(g)


def test_spectral_derivative_single_mode():
    L = 3.0
    sg = SpatialGrid(1, (L,), (16,))
    x = sg.coords(0)
    g = np.cos(2 * np.pi * x / L)
    d = spectral_x_derivative(g, sg, 0, 1)
    np.testing.assert_allclose(d, -(2 * np.pi / L) * np.sin(2 * np.pi * x / L), atol=1e-12)
    assert np.max(np.abs(spectral_x_derivative(np.full(sg.shape, 2.5), sg, 0, 3))) < 1e-12


def test_spectral_derivative_composition(rng):
    sg = SpatialGrid(2, (1.0, 2.0), (8, 8))
    # band-limited: no Nyquist content
    gh = np.zeros(sg.shape, dtype=complex)
    g = rng.standard_normal(sg.shape)
    gh = sg.forward(g)
    gh[np.broadcast_to(sg.nyquist_mask, gh.shape)] = 0.0
    g = sg.inverse(gh)
    for axis in (0, 1):
        two = spectral_x_derivative(spectral_x_derivative(g, sg, axis, 1), sg, axis, 1)
        np.testing.assert_allclose(spectral_x_derivative(g, sg, axis, 2), two, atol=1e-10)


def test_spectral_derivative_errors():
    sg = SpatialGrid(1, (1.0,), (8,))
    with pytest.raises(GridError):
        spectral_x_derivative(np.zeros(8), sg, 1, 1)
    with pytest.raises(ValueError):
        spectral_x_derivative(np.zeros(8), sg, 0, 4)


def test_velocity_moments_of_maxwellian():
    vg = VelocityGrid(6.0, 16)
    assert float(velocity_moment(vg.mu, vg, "1")) == pytest.approx(1.0, abs=1e-8)
    assert abs(float(velocity_moment(vg.mu, vg, "v1"))) < 1e-14
    assert float(velocity_moment(vg.mu, vg, "|v|^2")) == pytest.approx(3.0, abs=1e-6)
    custom = velocity_moment(vg.mu, vg, lambda v: v[..., 0] ** 2)
    assert float(custom) == pytest.approx(1.0, abs=1e-6)


def test_velocity_moment_refinement():
    errs = [abs(float(velocity_moment(VelocityGrid(6.0, n).mu, VelocityGrid(6.0, n), "|v|^2")) - 3.0) for n in (8, 16)]
    assert errs[1] <= 0.5 * errs[0]


def test_velocity_moment_rejects_mismatch(sg8):
    vg, other = VelocityGrid(6.0, 8), VelocityGrid(6.0, 10)
    f = PairDistribution.zeros(sg8, vg)
    with pytest.raises(GridError):
        velocity_moment(f, other)
    with pytest.raises(GridError):
        velocity_moment(np.zeros(other.shape), vg)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_moment_symmetry_even_against_odd(seed):
    vg = VelocityGrid(6.0, 8)
    g = np.random.default_rng(seed).standard_normal(vg.shape)
    even = g + g[::-1, ::-1, ::-1]
    for tag in ("v1", "v2", "v3"):
        assert abs(float(velocity_moment(even, vg, tag))) <= 1e-13 * max(1.0, np.abs(even).sum())


def test_velocity_derivative_linear_and_gaussian():
    vg = VelocityGrid(6.0, 16)
    v1 = vg.nodes[..., 0]
    np.testing.assert_allclose(velocity_derivative(v1, vg, 0, 1), 1.0, atol=1e-12)
    assert np.max(np.abs(velocity_derivative(np.full(vg.shape, 3.0), vg, 2, 2))) < 1e-10
    errs = []
    for n in (16, 32):
        g = VelocityGrid(6.0, n)
        d = velocity_derivative(g.sqrt_mu, g, 0, 1)
        errs.append(np.max(np.abs(d + 0.5 * g.nodes[..., 0] * g.sqrt_mu)))
    assert errs[1] < errs[0] / 3.0  # second order


@pytest.mark.parametrize("order", [1, 2, 3])
def test_fd_matrix_exact_on_polynomials(order):
    n, h = 12, 0.3
    x = h * np.arange(n)
    D = fd_matrix(n, order, h)
    for p in range(order + 2):
        exact = np.zeros(n) if p < order else math.factorial(p) / math.factorial(p - order) * x ** (p - order)
        np.testing.assert_allclose(D @ x**p, exact, atol=1e-8 * max(1.0, np.max(np.abs(exact))))


def test_pair_distribution_algebra(sg8, vg8, rng):
    from conftest import random_pair

    f = random_pair(rng, sg8, vg8)
    g = random_pair(rng, sg8, vg8)
    assert (f + g).inner(f) == pytest.approx(f.inner(f) + g.inner(f), rel=1e-12)
    assert (2.0 * f).norm() == pytest.approx(2.0 * f.norm(), rel=1e-14)
    s, d = f.s, f.d
    back = PairDistribution.from_sum_diff(s, d, sg8, vg8)
    np.testing.assert_allclose(back.plus, f.plus, atol=1e-14)
    np.testing.assert_allclose(back.minus, f.minus, atol=1e-14)
    np.testing.assert_array_equal(f.swapped().plus, f.minus)
    other = PairDistribution.zeros(SpatialGrid(1, (1.0,), (8,)), vg8)
    with pytest.raises(GridError):
        f.check_grid(other)


def test_pair_distribution_shape_and_finiteness(sg8, vg8):
    bad = np.zeros(sg8.shape + vg8.shape)
    assert PairDistribution(bad, bad, sg8, vg8).is_finite()
    bad[0, 0, 0, 0] = np.nan
    assert not PairDistribution(bad, np.zeros_like(bad), sg8, vg8).is_finite()
    with pytest.raises(GridError):
        PairDistribution(np.zeros(vg8.shape), np.zeros(vg8.shape), sg8, vg8)


def test_multi_indices():
    idx = multi_indices(3, 2)
    assert len(idx) == 10 and idx[0] == (0, 0, 0)
    assert all(sum(i) <= 2 for i in idx)
    assert multi_indices(1, 3, 1) == [(1,), (2,), (3,)]


def test_grid_dict_roundtrip():
    sg = SpatialGrid(2, (1.0, 2.0), (4, 8))
    assert SpatialGrid.from_dict(sg.to_dict()) == sg
    vg = VelocityGrid(5.0, 10)
    assert VelocityGrid.from_dict(vg.to_dict()) == vg
