import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loggas.meanfield_pde import (CFLViolation, DensityField, GridResolutionError,
                                  WindowTooLargeError, gaussian_density, gaussian_mixture_density,
                                  heat_baseline, heat_propagate, load_field, log_derivative_fields,
                                  picard_mild_iterate, poisson_velocity, radial_profile,
                                  save_field, step_density, write_radial_profile_csv,
                                  write_slice_csv)


def gauss(s2=1.0, L=8.0, M=64, beta=1.0):
    return DensityField.from_function(gaussian_density(s2), L, M, beta=beta)


def test_radial_velocity_matches_enclosed_mass():
    s2 = 1.0
    f = gauss(s2, 10.0, 256)
    _, u = poisson_velocity(f)
    x, y = f.mesh()
    r = np.hypot(x, y)
    sel = np.abs(r - 3.0) < 0.5
    exact = (1 - np.exp(-r[sel] ** 2 / (2 * s2))) / (2 * math.pi * r[sel])
    assert np.abs(u.magnitude()[sel] / exact - 1).max() < 1e-2


def test_disk_velocity_outside():
    R = 1.0
    rho = lambda x, y: (np.hypot(x, y) <= R) / (math.pi * R * R)
    f = DensityField.from_function(rho, 4.0, 256, normalize=True)
    _, u = poisson_velocity(f)
    x, y = f.mesh()
    r = np.hypot(x, y)
    sel = (r > 2.0) & (r < 3.5)
    assert np.abs(u.magnitude()[sel] * 2 * math.pi * r[sel] - 1).max() < 1e-2


def test_symmetric_density_zero_velocity_at_center():
    rho = gaussian_mixture_density([1, 1], [(-1.5, 0.0), (1.5, 0.0)], [0.5, 0.5])
    f = DensityField.from_function(rho, 8.0, 64)
    psi, u = poisson_velocity(f)
    c = f.resolution // 2
    # the origin is a cell corner; average the four neighbours
    ux = u.x[c - 1:c + 1, c - 1:c + 1].mean()
    uy = u.y[c - 1:c + 1, c - 1:c + 1].mean()
    assert abs(ux) < 1e-13 and abs(uy) < 1e-13
    np.testing.assert_allclose(u.x, -u.x[::-1], atol=1e-13)


def test_velocity_is_minus_potential_gradient():
    f = gauss(1.0, 8.0, 64)
    psi, u = poisson_velocity(f)
    gx = np.gradient(psi, f.h, axis=0)
    np.testing.assert_allclose(u.x[1:-1], -gx[1:-1], atol=1e-14)


def test_heat_step_matches_baseline_second_order():
    errs = []
    for m in (64, 128):
        f = heat_baseline(1.0, 0.0, 2.0, 8.0, m)
        for _ in range(10):
            f = step_density(f, 0.05, interaction=False)
        errs.append(np.abs(f.values - heat_baseline(1.0, 0.5, 2.0, 8.0, m).values).max())
    assert errs[1] < 1e-3
    assert math.log2(errs[0] / errs[1]) > 1.8


def test_mass_positivity_sup_monotone():
    f = gauss(0.5, 8.0, 48, beta=2.0)
    m0 = f.mass()
    sup = f.sup()
    for _ in range(1000):
        f = step_density(f, 0.01)
        assert f.sup() <= sup + 1e-12
        sup = f.sup()
        assert f.values.min() >= 0
    assert abs(f.mass() - m0) < 1e-7


def test_single_step_mass_conservation():
    f = gauss(0.5, 8.0, 64)
    g = step_density(f, 0.01)
    assert abs(g.mass() - f.mass()) <= 1e-10 * f.mass()


def test_cfl_violation_rejected():
    f = gauss(0.01, 2.0, 64)
    with pytest.raises(CFLViolation):
        step_density(f, 1.0)


def test_space_convergence_with_interaction():
    def run(m):
        f = DensityField.from_function(gaussian_density(0.5), 6.0, m, beta=4.0)
        dt = 0.05 * 64 / m
        for _ in range(int(round(0.25 / dt))):
            f = step_density(f, dt, advection="central")
        return f.values

    a, b, c = run(32), run(64), run(128)
    coarse = lambda v: v.reshape(v.shape[0] // 2, 2, -1, 2).mean(axis=(1, 3))
    # cell averages of point values differ at O(h^2); compare on matched centers by restriction
    e1 = np.abs(coarse(b) - a).max()
    e2 = np.abs(coarse(c) - b).max()
    assert math.log2(e1 / e2) >= 1.8


def test_picard_k0_is_heat_and_contracts():
    f = gauss(1.0, 8.0, 64, beta=1.0)
    T = 0.25 / f.sup()
    res = picard_mild_iterate(f, T, 5, n_substeps=32)
    heat = heat_propagate(f.values, f.h, 1.0, T)
    np.testing.assert_allclose(res.iterates[0].values, heat, atol=1e-15)
    assert all(r <= 0.5 for r in res.ratios)


def test_picard_agrees_with_stepper():
    f = gauss(1.0, 8.0, 64, beta=1.0)
    T = 0.25 / f.sup()
    pic = picard_mild_iterate(f, T, 8, n_substeps=128).iterates[-1].values
    diffs = []
    for n in (16, 32):
        g = f
        for _ in range(n):
            g = step_density(g, T / n, advection="central")
        diffs.append(np.abs(g.values - pic).max())
    assert diffs[1] < 1e-4 * f.sup()


def test_picard_window_guard():
    f = gauss(1.0, 8.0, 64)
    with pytest.raises(WindowTooLargeError):
        picard_mild_iterate(f, 10.0 / f.sup(), 2)


def test_heat_baseline_values():
    f = heat_baseline(1.0, 0.0, 1.0, 8.0, 64)
    np.testing.assert_allclose(f.values, gauss(1.0, 8.0, 64).values, rtol=1e-15)
    g = heat_baseline(1.0, 0.5, 1.0, 10.0, 65)
    assert g.sup() == pytest.approx(1 / (2 * math.pi * 2.0), rel=1e-15)
    x, y = g.mesh()
    var = np.sum(x * x * g.values) * g.h**2
    assert var == pytest.approx(2.0, rel=1e-6)
    with pytest.raises(ValueError):
        heat_baseline(1.0, -1.0, 1.0, 8.0, 64)


def test_log_derivatives_of_gaussian():
    s2 = 2.0
    f = gauss(s2, 12.0, 128)
    grad, hess, mask = log_derivative_fields(f)
    x, y = f.mesh()
    assert np.abs(grad.x[mask] + x[mask] / s2).max() < 1e-10
    assert np.abs(hess[0][mask] + 1 / s2).max() < 1e-8
    assert np.abs(hess[1][mask]).max() < 1e-8
    assert np.abs(hess[2][mask] + 1 / s2).max() < 1e-8


@settings(max_examples=10, deadline=None)
@given(st.floats(1e-12, 1e-3))
def test_mask_grows_when_floor_halved(floor):
    f = gauss(1.0, 8.0, 64)
    _, _, m1 = log_derivative_fields(f, floor)
    _, _, m2 = log_derivative_fields(f, floor / 2)
    assert np.all(m2[m1]) and m2.sum() >= m1.sum()


def test_empty_mask_and_bad_floor():
    f = gauss(1.0, 8.0, 64)
    with pytest.raises(ValueError):
        log_derivative_fields(f, 0.0)
    with pytest.raises(ValueError):
        log_derivative_fields(f, 10.0)


def test_field_guards():
    with pytest.raises(GridResolutionError):
        DensityField.from_function(gaussian_density(4.0), 2.0, 32)
    with pytest.raises(GridResolutionError):
        DensityField(4.0, 8, np.ones((8, 8)))
    with pytest.raises(ValueError):
        DensityField(4.0, 8, -np.ones((8, 8)))


def test_field_io(tmp_path):
    f = gauss(1.0, 8.0, 32, beta=3.0)
    f.time = 1.25
    save_field(tmp_path / "f.lgf", f)
    g = load_field(tmp_path / "f.lgf")
    assert np.array_equal(f.values, g.values)
    assert (g.half_width, g.resolution, g.time, g.beta) == (8.0, 32, 1.25, 3.0)
    write_slice_csv(tmp_path / "s.csv", f)
    write_radial_profile_csv(tmp_path / "r.csv", f, 16)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "r,rho_mean" and len(lines) == 17
    r, prof = radial_profile(f, 16)
    assert np.all(np.diff(prof[np.isfinite(prof)]) < 0)
