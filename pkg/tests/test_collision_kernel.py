from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from conftest import broadcast_pair, random_pair
from vmblimit.collision_kernel import (
    KernelError,
    KernelModel,
    MemoryBudgetError,
    SphereQuadrature,
    apply_L,
    boltzmann_q,
    build_linearized,
    coercivity,
    collision_frequency,
    dirichlet_form,
    gamma_bilinear,
    null_space_residuals,
    operator_key,
)
from vmblimit.macro_micro import micro_part, project_P
from vmblimit.phase_grid import PairDistribution, SpatialGrid, VelocityGrid


def nu_hard_sphere(r: float) -> float:
    if r == 0.0:
        return 8.0 * math.pi * math.sqrt(2.0 / math.pi)
    return 4.0 * math.pi * (math.sqrt(2.0 / math.pi) * math.exp(-r * r / 2) + (r + 1.0 / r) * erf(r / math.sqrt(2.0)))


def test_sphere_quadrature_integrals():
    q = SphereQuadrature()
    assert q.integrate(lambda d: np.ones(len(d))) == pytest.approx(4 * math.pi, abs=1e-10)
    assert q.integrate(lambda d: np.abs(d[:, 2])) == pytest.approx(2 * math.pi, abs=1e-8)
    with pytest.raises(KernelError):
        SphereQuadrature(0, 8)


def test_kernel_model_validation():
    with pytest.raises(KernelError):
        KernelModel(gamma=-3.0)
    with pytest.raises(KernelError):
        KernelModel(gamma=1.5)
    with pytest.raises(KernelError):
        KernelModel(angular_profile="nope")
    assert KernelModel().grad_bound_violations() == 0
    assert KernelModel.from_dict(KernelModel().to_dict()) == KernelModel()


def test_grad_bound_fault_injection():
    def flat(c):
        return np.ones_like(c)

    assert KernelModel(angular_profile=flat).grad_bound_violations() > 0


@pytest.mark.parametrize("r", [0.0, 2.0])
def test_collision_frequency_closed_form(r):
    val = collision_frequency([r, 0.0, 0.0], KernelModel())
    assert val == pytest.approx(nu_hard_sphere(r), rel=1e-4)
    assert nu_hard_sphere(0.0) == pytest.approx(20.0531, rel=1e-5)


def test_collision_frequency_growth(op8, vg8):
    ratio = op8.nu / (1.0 + np.sqrt(vg8.speed2.ravel()))
    assert np.all(op8.nu > 0)
    assert 0.0 < ratio.min() <= ratio.max() < 10 * ratio.min()


def test_collision_frequency_soft_potential_decreases():
    m = KernelModel(gamma=-1.0)
    vals = [collision_frequency([r, 0, 0], m) for r in (0.5, 2.0, 5.0)]
    assert vals[0] > vals[1] > vals[2] > 0


def test_operator_symmetry_and_null_space(op8):
    for L in (op8.L_sum, op8.L_diff):
        assert np.max(np.abs(L - L.T)) <= 1e-10 * np.max(np.abs(L))
    assert op8.asymmetry <= 1e-10
    assert np.all(null_space_residuals(op8) <= 1e-6)


def test_decomposition_nu_minus_K(op8):
    np.testing.assert_allclose(np.diag(op8.nu) - op8.K_same, op8.L_same, atol=1e-12 * np.max(np.abs(op8.L_same)))
    np.testing.assert_allclose(-op8.K_cross, op8.L_cross, atol=0)


def test_coercivity_positive(op8):
    rep = coercivity(op8, n_random=200, seed=3)
    assert rep.sigma0 > 1e-3
    assert rep.min_form > 0
    assert rep.rayleigh_min >= rep.sigma0 * (1 - 1e-9)


def test_apply_L_linearity_and_symmetry(op8, sg8, vg8, rng):
    f, g = random_pair(rng, sg8, vg8), random_pair(rng, sg8, vg8)
    a, b = 0.7, -1.3
    lhs = apply_L(a * f + b * g, op8)
    rhs = a * apply_L(f, op8) + b * apply_L(g, op8)
    assert (lhs - rhs).norm() <= 1e-12 * lhs.norm()
    assert abs(apply_L(f, op8).inner(g) - f.inner(apply_L(g, op8))) <= 1e-10 * f.norm() * g.norm()
    assert dirichlet_form(f, op8) >= 0


def test_apply_L_on_null_space_and_micro_output(op8, sg8, vg8, rng):
    sm, v = vg8.sqrt_mu, vg8.nodes
    x = sg8.coords(0)
    f = broadcast_pair(sm, 0 * sm, sg8, vg8, np.cos(x)) + broadcast_pair(v[..., 1] * sm, v[..., 1] * sm, sg8, vg8, np.sin(x))
    Lf = apply_L(f, op8)
    assert Lf.norm() <= 1e-6 * f.norm() * np.max(op8.nu)
    g = micro_part(random_pair(rng, sg8, vg8))
    Lg = apply_L(g, op8)
    assert project_P(Lg).norm() <= 1e-8 * Lg.norm()


def test_species_exchange_symmetry(op8, sg8, vg8, rng):
    f = random_pair(rng, sg8, vg8)
    a, b = apply_L(f.swapped(), op8), apply_L(f, op8).swapped()
    assert (a - b).norm() <= 1e-13 * b.norm()


def test_apply_L_rejects_other_lattice(op8, sg8):
    with pytest.raises(KernelError):
        apply_L(PairDistribution.zeros(sg8, VelocityGrid(6.0, 4)), op8)


def test_small_lattice_oracle(cache_dir):
    """Assembled L on a 4³ lattice against the linearization of the independent Q quadrature."""
    vg = VelocityGrid(6.0, 4)
    model = KernelModel()
    op = build_linearized(vg, model, cache_dir=cache_dir)
    rng = np.random.default_rng(7)
    mu, sm = vg.mu, vg.sqrt_mu
    for _ in range(3):
        h = rng.standard_normal(vg.shape)
        q1 = boltzmann_q(sm * h, mu, vg, model)
        q2 = boltzmann_q(mu, sm * h, vg, model)
        # L_sum acts on f₊ + f₋, L_diff on f₊ − f₋
        want_s = -2.0 * (q1 + q2) / sm
        want_d = -2.0 * q1 / sm
        got_s = (op.L_sum @ h.ravel()).reshape(vg.shape)
        got_d = (op.L_diff @ h.ravel()).reshape(vg.shape)
        assert np.max(np.abs(got_s - want_s)) <= 1e-10 * np.max(np.abs(want_s))
        assert np.max(np.abs(got_d - want_d)) <= 1e-10 * np.max(np.abs(want_d))


def test_q_maxwellian_equilibrium(op8, vg8):
    q = boltzmann_q(vg8.mu, vg8.mu, vg8)
    assert np.max(np.abs(q)) <= 1e-6 * np.max(np.abs(op8.nu.reshape(vg8.shape) * vg8.mu))


def test_q_conservation_random(vg8):
    rng = np.random.default_rng(5)
    F = rng.random((4,) + vg8.shape) * vg8.mu
    Q = boltzmann_q(F, F, vg8)
    v = vg8.nodes
    for w, tol in ((np.ones(vg8.shape), 1e-8), (v[..., 0], 1e-6), (v[..., 2], 1e-6), (vg8.speed2, 1e-6)):
        num = np.abs(np.sum(Q * w, axis=(1, 2, 3)))
        den = np.sum(np.abs(Q * w), axis=(1, 2, 3))
        assert np.all(num <= tol * den)


def test_q_rejects_mismatch(vg8):
    with pytest.raises(KernelError):
        boltzmann_q(np.zeros(vg8.shape), np.zeros((4, 4, 4)), vg8)


def test_collision_sum_bilinear(vg8):
    from vmblimit.collision_kernel import collision_sum

    rng = np.random.default_rng(11)
    f, g, k = (rng.standard_normal(vg8.size) for _ in range(3))
    a = 1.7
    hF = np.stack([f, k, f + a * k, g, g, g])
    hG = np.stack([g, g, g, f, k, f + a * k])
    out = collision_sum(hF, hG, vg8, KernelModel())
    scale = np.max(np.abs(out))
    assert np.max(np.abs(out[2] - out[0] - a * out[1])) <= 1e-12 * scale
    assert np.max(np.abs(out[5] - out[3] - a * out[4])) <= 1e-12 * scale


def test_gamma_properties(vg8, rng):
    sg = SpatialGrid(1, (1.0,), (4,))
    sm = vg8.sqrt_mu
    eq = broadcast_pair(sm, sm, sg, vg8)
    assert gamma_bilinear(eq, eq).norm() <= 1e-6 * eq.norm() * 20.0
    g, h = random_pair(rng, sg, vg8, 1e-2), random_pair(rng, sg, vg8, 1e-2)
    gh = gamma_bilinear(g, h)
    sw = gamma_bilinear(g.swapped(), h.swapped())
    assert (sw - gh.swapped()).norm() <= 1e-13 * sw.norm()
    # mass is conserved per species for any pair of arguments
    for comp in (gh.plus, gh.minus):
        mass = np.abs(np.sum(comp * sm, axis=(1, 2, 3)))
        assert np.all(mass <= 1e-6 * np.sum(np.abs(comp * sm), axis=(1, 2, 3)))


def test_gamma_floor_count(vg8):
    z = PairDistribution.zeros(SpatialGrid(1, (1.0,), (4,)), vg8)
    res = gamma_bilinear(z, z, KernelModel(mu_floor=1e-5), return_floored=True)
    assert res.floored > 0
    assert res.value.norm() == 0.0


def test_operator_cache_hit_and_key(vg8, cache_dir, op8):
    again = build_linearized(vg8, KernelModel(), cache_dir=cache_dir)
    assert again.key == op8.key
    np.testing.assert_array_equal(again.L_sum, op8.L_sum)
    assert operator_key(vg8, KernelModel(gamma=0.5)) != op8.key
    assert operator_key(VelocityGrid(6.0, 10), KernelModel()) != op8.key


def test_memory_budget():
    with pytest.raises(MemoryBudgetError):
        build_linearized(VelocityGrid(6.0, 8), KernelModel(memory_budget_bytes=1e3))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dirichlet_form_nonnegative(op8, seed):
    sg = SpatialGrid(1, (1.0,), (4,))
    f = random_pair(np.random.default_rng(seed), sg, op8.vgrid)
    assert dirichlet_form(f, op8) >= -1e-12 * f.norm() ** 2
