import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cellpol.bulk import (
    BALL_VOLUME,
    BulkDiffusion,
    BulkField,
    harmonic_extend,
    harmonic_profiles,
    laplace_ode_residual,
    radial_heat_step,
    radial_mesh,
)
from cellpol.spectral import SQRT_FOUR_PI, SurfaceField, dtn, sphere_grid


def random_surface(L, seed=0):
    grid = sphere_grid(L)
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(grid.ncoef) / (1.0 + grid.degrees) ** 2
    return SurfaceField(grid, c)


def observed_orders(errors, nrs):
    return [math.log(errors[i] / errors[i + 1]) / math.log(nrs[i + 1] / nrs[i]) for i in range(len(nrs) - 1)]


def test_mesh_volumes_sum_to_ball():
    mesh = radial_mesh(17)
    assert math.isclose(4 * math.pi * mesh.volumes.sum(), BALL_VOLUME, rel_tol=1e-14)


def test_constant_field_integral():
    grid = sphere_grid(4)
    w = BulkField.constant(grid, radial_mesh(16), 2.0)
    assert math.isclose(w.integral(), 2.0 * BALL_VOLUME, rel_tol=1e-14)
    assert math.isclose(w.mean(), 2.0, rel_tol=1e-14)
    assert w.deviation_norm() < 1e-14
    assert w.gradient_norm() == 0.0


def test_quadratic_profile_integral_second_order():
    # int_ball r^2 = 4 pi / 5
    grid = sphere_grid(2)
    errs = []
    nrs = (16, 32, 64)
    for nr in nrs:
        mesh = radial_mesh(nr)
        p = np.zeros((grid.ncoef, nr))
        p[0] = SQRT_FOUR_PI * mesh.r**2
        w = BulkField(grid, mesh, p, np.eye(grid.ncoef)[0] * SQRT_FOUR_PI)
        errs.append(abs(w.integral() - 4 * math.pi / 5))
    assert min(observed_orders(errs, nrs)) > 1.9


def test_harmonic_profiles_approach_powers_of_r():
    nrs = (32, 64, 128)
    errs = []
    for nr in nrs:
        prof = harmonic_profiles(nr, 5)
        r = radial_mesh(nr).r
        errs.append(max(np.max(np.abs(prof[l] - r**l)) for l in range(6)))
    assert min(observed_orders(errs, nrs)) > 1.9


def test_dtn_by_radial_derivative_converges_second_order():
    f = random_surface(6, 1)
    nrs = (32, 64, 128)
    errs = [np.max(np.abs(harmonic_extend(f, nr).flux - dtn(f).coeffs)) for nr in nrs]
    assert min(observed_orders(errs, nrs)) > 1.9


def test_laplace_ode_residual_shrinks():
    f = random_surface(6, 2)
    nrs = (64, 128, 256)
    res = [np.max(np.abs(laplace_ode_residual(harmonic_extend(f, nr)))) for nr in nrs]
    assert res[-1] < 1e-3
    assert min(observed_orders(res, nrs)) > 1.9


def test_trace_of_extension_is_the_data():
    f = random_surface(5, 3)
    w = harmonic_extend(f, 32)
    assert_allclose(w.trace().coeffs, f.coeffs)
    assert w.lower_bound() <= w.minimum() + 1e-14


def test_robin_equilibrium_is_stationary():
    """Constant w with a5 v = a6 w has zero flux and stays put."""
    grid = sphere_grid(4)
    mesh = radial_mesh(16)
    a5, a6 = 2.0, 0.5
    w = BulkField.constant(grid, mesh, 1.2)
    v = SurfaceField.constant(grid, a6 * 1.2 / a5)
    out = radial_heat_step(w, v, 0.1, D=3.0, a5=a5, a6=a6)
    assert_allclose(out.profiles, w.profiles, atol=1e-14)
    assert np.max(np.abs(out.flux)) < 1e-14


def test_heat_step_mass_audit():
    """eps d/dt int w equals the integrated boundary flux, to round-off."""
    grid = sphere_grid(6)
    mesh = radial_mesh(32)
    v = random_surface(6, 4) + 1.0
    w = harmonic_extend(random_surface(6, 5) + 0.5, 32)
    eps, dt = 0.3, 0.05
    bd = BulkDiffusion(grid, mesh, D=2.0, a5=1.0, a6=1.5, eps=eps)
    for _ in range(10):
        new = bd.heat_step(w, v, dt)
        lhs = eps * (new.integral() - w.integral())
        rhs = dt * SQRT_FOUR_PI * new.flux[0]
        assert abs(lhs - rhs) < 1e-13 * max(1.0, abs(w.integral()))
        w = new


def test_heat_step_decays_without_source():
    grid = sphere_grid(4)
    mesh = radial_mesh(24)
    w = harmonic_extend(random_surface(4, 6) + 1.0, 24)
    zero = SurfaceField.constant(grid, 0.0)
    bd = BulkDiffusion(grid, mesh, D=1.0, a5=1.0, a6=1.0)
    norms = [w.l2_norm()]
    for _ in range(20):
        w = bd.heat_step(w, zero, 0.02)
        norms.append(w.l2_norm())
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_boundary_value_satisfies_robin_condition():
    grid = sphere_grid(4)
    mesh = radial_mesh(20)
    bd = BulkDiffusion(grid, mesh, D=0.7, a5=1.3, a6=0.4)
    rng = np.random.default_rng(7)
    v = rng.standard_normal(grid.ncoef)
    last = rng.standard_normal(grid.ncoef)
    flux = bd.flux(v, last)
    b = bd.boundary_values(last, flux)
    assert_allclose(flux, bd.a5 * v - bd.a6 * b, atol=1e-14)
    assert_allclose(bd.D * (b - last) / (mesh.h / 2), flux, atol=1e-13)


def test_steady_exchange_matches_continuum():
    """For w = phi r^l: D l phi = a5 - a6 phi, so the exchange is a5 D l/(D l + a6)."""
    grid = sphere_grid(5)
    D, a5, a6 = 2.0, 1.0, 3.0
    nrs = (32, 64, 128)
    errs = []
    ls = grid.degrees
    exact = a5 * D * ls / (D * ls + a6)
    for nr in nrs:
        bd = BulkDiffusion(grid, radial_mesh(nr), D=D, a5=a5, a6=a6)
        errs.append(np.max(np.abs(bd.steady_exchange() - exact)))
    assert errs[-1] < 1e-4
    assert min(observed_orders(errs, nrs)) > 1.9


def test_steady_field_has_zero_residual():
    grid = sphere_grid(5)
    bd = BulkDiffusion(grid, radial_mesh(32), D=2.0, a5=1.0, a6=3.0)
    v = random_surface(5, 8)
    w = bd.steady_field(v)
    res, flux = bd.residual(w, v)
    assert np.max(np.abs(res)) < 1e-12
    assert_allclose(flux, bd.steady_exchange() * v.coeffs, atol=1e-12)


def test_invalid_parameters():
    grid = sphere_grid(2)
    with pytest.raises(ValueError):
        BulkDiffusion(grid, radial_mesh(8), D=0.0, a5=1, a6=1)
    with pytest.raises(ValueError):
        radial_mesh(1)
    with pytest.raises(ValueError):
        BulkField(grid, radial_mesh(8), np.zeros((3, 8)), np.zeros(9))
