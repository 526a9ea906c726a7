import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from loggas.chaos_functionals import (DIAGNOSTIC_COLUMNS, ConvergenceError, FunctionalValue,
                                      ParticleOutsideGridError, PotentialInterpolant,
                                      ProductGaussian, QuadraticConfinement,
                                      calibrate_serfaty_constant, gaussian_kl,
                                      gibbs_fixed_point_residual, gibbs_reassembly_residual,
                                      gibbs_symmetrized_identity, gibbs_weights,
                                      marginal_kl_knn, modulated_energy, modulated_energy_batch,
                                      modulated_free_energy, relative_entropy_analytic,
                                      relative_fisher_analytic, sample_confined_gibbs,
                                      serfaty_lower_bound_margin, solve_gibbs_equilibrium,
                                      write_diagnostics_csv)
from loggas.meanfield_pde import DensityField, gaussian_density
from loggas.particle_system import ParticleState

EULER = 0.5772156649015329


def gaussian_potential(r, s2):
    # g * rho for an isotropic Gaussian with variance s2 per coordinate
    r = np.maximum(r, 1e-300)
    return -(np.log(r * r) + special.exp1(r * r / (2 * s2))) / (4 * math.pi)


def gaussian_self_energy(s2):
    # E g(X - Y) for X, Y i.i.d.: |X - Y|^2 = 4 s2 Exp(1)
    return -(math.log(4 * s2) - EULER) / (4 * math.pi)


def field(s2=1.0, L=10.0, M=256, mean=(0.0, 0.0)):
    return DensityField.from_function(gaussian_density(s2, mean), L, M)


def test_potential_oracle_by_radial_quadrature():
    s2 = 1.3
    rho = lambda s: math.exp(-s * s / (2 * s2)) / (2 * math.pi * s2)
    for r in (0.3, 1.0, 2.5):
        inner = 1 - math.exp(-r * r / (2 * s2))
        outer = integrate.quad(lambda s: math.log(s) * rho(s) * 2 * math.pi * s, r, np.inf)[0]
        direct = -(inner * math.log(r) + outer) / (2 * math.pi)
        assert gaussian_potential(r, s2) == pytest.approx(direct, rel=1e-10)


def test_potential_interpolant_matches_oracle():
    f = field()
    pot = PotentialInterpolant(f)
    pts = np.array([[0.1, 0.2], [1.5, -0.7], [-3.0, 2.2]])
    exact = gaussian_potential(np.hypot(pts[:, 0], pts[:, 1]), 1.0)
    assert np.abs(pot(pts) - exact).max() < 1e-5
    assert pot.energy == pytest.approx(gaussian_self_energy(1.0), abs=1e-5)


def test_two_particle_modulated_energy_oracle():
    f = field()
    x = np.array([[0.3, -0.4], [-1.0, 0.8]])
    fn = modulated_energy(ParticleState.from_positions(x), f).value
    d = np.linalg.norm(x[0] - x[1])
    pair = 2 * (-math.log(d) / (2 * math.pi)) / 4
    psi = gaussian_potential(np.hypot(x[:, 0], x[:, 1]), 1.0)
    exact = pair - psi.sum() + gaussian_self_energy(1.0)
    assert abs(fn - exact) <= 1e-3 * abs(exact)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_modulated_energy_permutation_and_batch(seed):
    f = field(1.0, 8.0, 64)
    pot = PotentialInterpolant(f)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 16, 2))
    single = [modulated_energy(ParticleState.from_positions(c), f, pot).value for c in x]
    np.testing.assert_allclose(modulated_energy_batch(x, pot), single, rtol=1e-12, atol=1e-14)
    perm = rng.permutation(16)
    p = modulated_energy(ParticleState.from_positions(x[0][perm]), f, pot).value
    assert p == pytest.approx(single[0], rel=1e-12, abs=1e-14)


def test_modulated_energy_grid_refinement():
    x = np.random.default_rng(3).normal(size=(32, 2))
    st_ = ParticleState.from_positions(x)
    a = modulated_energy(st_, field(1.0, 10.0, 256)).value
    b = modulated_energy(st_, field(1.0, 10.0, 512)).value
    assert abs(a - b) <= 1e-3 * max(abs(b), 1e-3)


def test_particle_outside_grid():
    f = field(1.0, 8.0, 64)
    with pytest.raises(ParticleOutsideGridError):
        modulated_energy(ParticleState.from_positions([[0, 0], [9.0, 0]]), f)


def test_iid_mean_is_exactly_order_one_over_n():
    # diagonal excluded: E F_N = (1 - 1/N) e - 2 e + e = -e / N with e = int psi rho
    f = field(1.0, 10.0, 256)
    pot = PotentialInterpolant(f)
    rng = np.random.default_rng(0)
    e = gaussian_self_energy(1.0)
    for n, reps in ((64, 400), (128, 200), (256, 100)):
        vals = n * modulated_energy_batch(rng.normal(size=(reps, n, 2)), pot)
        se = vals.std(ddof=1) / math.sqrt(reps)
        assert abs(vals.mean() + e) < 4 * se + 1e-3


def test_serfaty_margin():
    m = serfaty_lower_bound_margin(-0.01, 64, 0.2)
    assert serfaty_lower_bound_margin(-0.01, 64, 0.4) - m == pytest.approx(math.log(2) / 256)
    assert serfaty_lower_bound_margin(0.02, 64, 0.2) > m
    with pytest.raises(ValueError):
        serfaty_lower_bound_margin(0.0, 1, 0.2)
    f = field(1.0, 10.0, 128)
    sampler = lambda rng, n: rng.normal(size=(n, 2))
    c = calibrate_serfaty_constant(sampler, f, 128, 200, seed=1)
    assert c >= 0
    c2 = calibrate_serfaty_constant(sampler, f, 128, 200, seed=1)
    assert c == c2


def test_relative_entropy_closed_form():
    f = field(2.0, 14.0, 256)
    assert relative_entropy_analytic(ProductGaussian(1.0), f).value == pytest.approx(
        gaussian_kl(1.0, 2.0), abs=1e-6)
    assert relative_entropy_analytic(ProductGaussian(2.0), f).value == pytest.approx(0, abs=1e-12)
    with pytest.raises(ValueError):
        relative_entropy_analytic(ProductGaussian(100.0), f)


def test_relative_entropy_nonnegative_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(100):
        s1, s2 = rng.uniform(0.5, 2.0, 2)
        shift = rng.normal(size=2)
        assert gaussian_kl(s1, s2, shift @ shift) >= 0
    for _ in range(5):
        s1, s2 = rng.uniform(0.5, 2.0, 2)
        f = DensityField.from_function(gaussian_density(s2), 14.0, 128)
        assert relative_entropy_analytic(ProductGaussian(s1), f).value >= 0


def test_relative_fisher_closed_form():
    s2 = 2.0
    delta = np.array([0.6, -0.3])
    f = field(s2, 14.0, 256, mean=tuple(delta))
    val = relative_fisher_analytic(ProductGaussian(s2), f).value
    assert val == pytest.approx(delta @ delta / s2**2, abs=1e-5)
    assert relative_fisher_analytic(ProductGaussian(s2, tuple(delta)), f).value == \
        pytest.approx(0, abs=1e-12)


def test_marginal_kl_self_and_shift():
    f = field(1.0, 10.0, 256)
    rng = np.random.default_rng(2)
    s = rng.normal(size=(4000, 2))
    kl = marginal_kl_knn(s, f)
    assert abs(kl.value) <= 3 * kl.error_estimate
    again = marginal_kl_knn(s[rng.permutation(4000)], f)
    assert again.value == kl.value
    shifted = marginal_kl_knn(s + [0.8, 0.0], f)
    exact = gaussian_kl(1.0, 1.0, 0.64)
    assert abs(shifted.value - exact) <= 3 * shifted.error_estimate


def test_marginal_kl_guards():
    f = field(1.0, 8.0, 64)
    s = np.random.default_rng(0).normal(size=(200, 2))
    s[0] = [50.0, 0.0]
    with pytest.warns(UserWarning):
        marginal_kl_knn(s, f)
    with pytest.raises(ValueError):
        marginal_kl_knn(s[:50], f)
    with pytest.raises(ValueError):
        marginal_kl_knn(s, f, k=2)


def test_modulated_free_energy():
    assert modulated_free_energy(0.0, 0.0, 1.0) == 0.0
    assert modulated_free_energy(0.3, -0.1, 2.0) == pytest.approx(0.25)
    a, b = modulated_free_energy(0.3, 0.2, 2.0), modulated_free_energy(0.3, 0.4, 2.0)
    assert modulated_free_energy(0.3, 0.6, 2.0) - b == pytest.approx(b - a)
    with pytest.raises(ValueError):
        modulated_free_energy(0.0, 0.0, 0.0)


def test_functional_value_names():
    with pytest.raises(ValueError):
        FunctionalValue("H_N", 0.0)


def test_gibbs_weights():
    f = field(1.0, 8.0, 64)
    lg, _ = gibbs_weights(ParticleState.from_positions([[0, 0], [1, 0]]), f, 2.0)
    assert lg == 0.0
    x = ParticleState.from_positions(np.random.default_rng(4).normal(size=(8, 2)))
    a = gibbs_weights(x, f, 1.5)
    b = gibbs_weights(x, f, 3.0)
    np.testing.assert_allclose(b, 2 * np.array(a), rtol=1e-13)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_reassembly_identity(seed, beta):
    f = field(1.0, 8.0, 64)
    x = ParticleState.from_positions(np.random.default_rng(seed).normal(size=(8, 2)))
    assert abs(gibbs_reassembly_residual(x, f, beta)) < 1e-10


def test_equilibrium_uniform_at_zero_beta():
    eq = solve_gibbs_equilibrium(0.0, QuadraticConfinement(), 4.0, 32)
    assert np.ptp(eq.field.values) == 0.0
    assert eq.field.mass() == pytest.approx(1.0)


def test_equilibrium_perturbative_oracle():
    beta, k = 0.01, 100.0
    eq = solve_gibbs_equilibrium(beta, QuadraticConfinement(k), 8.0, 128, tol=1e-12)
    x, y = eq.field.mesh()
    r = np.hypot(x, y)
    s2 = 1.0 / (beta * k)
    rho0 = gaussian_density(s2)(x, y)
    psi0 = gaussian_potential(r, s2)
    first = rho0 * (1 - beta * (psi0 - gaussian_self_energy(s2)))
    shift = np.abs(eq.field.values - rho0).max()
    assert shift > 1e-5
    assert np.abs(eq.field.values - first).max() < 0.05 * shift
    assert gibbs_fixed_point_residual(eq) < 1e-12


def test_equilibrium_non_convergence():
    with pytest.raises(ConvergenceError) as info:
        solve_gibbs_equilibrium(1.0, QuadraticConfinement(), 6.0, 32, max_iter=3)
    assert len(info.value.residuals) == 3
    with pytest.raises(ValueError):
        solve_gibbs_equilibrium(1.0, QuadraticConfinement(), 6.0, 32, damping=1.0)


def test_symmetrized_identity_small_beta_and_guards():
    conf = QuadraticConfinement(4.0)
    rhs = []
    for beta in (0.02, 0.04):
        eq = solve_gibbs_equilibrium(beta, conf, 8.0 / math.sqrt(beta * 4.0), 64)
        s = sample_confined_gibbs(3, beta, conf, 256, 1e-2, 0.5, 4, 0.25, seed=0)
        rhs.append(gibbs_symmetrized_identity(s, eq, 4, with_lhs=False))
        with pytest.raises(NotImplementedError):
            gibbs_symmetrized_identity(s, eq, 4)
    assert abs(rhs[0].rhs) < 0.05 and abs(rhs[0].rhs) < abs(rhs[1].rhs) + 3 * rhs[1].rhs_error
    assert rhs[0].envelope == pytest.approx(0.02 / 8 * math.log(3) / 3)


def test_diagnostics_csv(tmp_path):
    digest = write_diagnostics_csv(tmp_path / "d.csv", [{"time": 0.5, "N": 64, "F_N": 0.1}])
    text = (tmp_path / "d.csv").read_text().splitlines()
    assert text[0].split(",") == list(DIAGNOSTIC_COLUMNS)
    assert text[1].startswith("0.5,64,0.1,")
    assert digest == write_diagnostics_csv(tmp_path / "e.csv", [{"time": 0.5, "N": 64,
                                                                  "F_N": 0.1}])
