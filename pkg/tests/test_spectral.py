import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from cellpol.errors import ConsistencyError, DomainError, FieldFormatError
from cellpol.spectral import (
    FOUR_PI,
    SurfaceField,
    dtn,
    laplace_beltrami,
    lm_index,
    n_coeffs,
    node_operator,
    ntd,
    ntd_of_laplacian_identity,
    pointwise_nonlinear,
    sphere_grid,
    sphere_minimum,
    tilde_dtn,
)

from oracles import basis_matrix, gauss_grid


def random_points(n, seed=0):
    p = np.random.default_rng(seed).standard_normal((n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def coeff_field(grid, coeffs):
    return SurfaceField(grid, np.asarray(coeffs, dtype=float))


coeff_lists = st.lists(st.floats(-10, 10, allow_nan=False), min_size=n_coeffs(6), max_size=n_coeffs(6))


def test_index_layout():
    assert n_coeffs(4) == 25
    assert lm_index(0, 0) == 0
    assert lm_index(1, -1) == 1
    assert lm_index(2, 2) == 8


def test_basis_matches_scipy_harmonics():
    L = 7
    grid = sphere_grid(L)
    pts = random_points(40)
    ref = basis_matrix(L, pts)
    for l in range(L + 1):
        for m in range(-l, l + 1):
            got = SurfaceField.basis(grid, l, m).evaluate(pts)
            assert_allclose(got, ref[:, lm_index(l, m)], atol=1e-13)


def test_grid_matches_independent_gauss_grid():
    grid = sphere_grid(9)
    nodes, W = gauss_grid(9)
    assert_allclose(grid.nodes.reshape(-1, 3), nodes, atol=1e-14)
    assert_allclose(grid.weights.ravel(), W, rtol=1e-14)
    assert_allclose(grid.weights.sum(), FOUR_PI, rtol=1e-14)


def test_node_matrix_matches_scipy():
    grid = sphere_grid(6)
    assert_allclose(grid.node_matrix(), basis_matrix(6, grid.nodes.reshape(-1, 3)), atol=1e-13)


def test_analysis_synthesis_round_trip():
    grid = sphere_grid(12)
    c = np.random.default_rng(3).standard_normal(grid.ncoef)
    assert_allclose(grid.analyze(grid.synthesize(c)), c, atol=1e-13)


def test_quadrature_orthonormality():
    L = 6
    grid = sphere_grid(L)
    S = grid.node_matrix()
    G = S.T @ (grid.weights.ravel()[:, None] * S)
    assert_allclose(G, np.eye(grid.ncoef), atol=1e-13)


def test_integrals_of_polynomials():
    # int x^2 = 4 pi / 3, int x^2 y^2 z^2 = 4 pi / 105
    grid = sphere_grid(8)
    f = SurfaceField.from_function(grid, lambda x, y, z: x**2)
    assert math.isclose(f.integral(), 4 * math.pi / 3, rel_tol=1e-13)
    f = SurfaceField.from_function(grid, lambda x, y, z: x**2 * y**2 * z**2)
    assert math.isclose(f.integral(), 4 * math.pi / 105, rel_tol=1e-12)
    assert math.isclose(f.mean(), 1 / 105, rel_tol=1e-12)


def test_laplacian_of_polynomials():
    # Lap z^2 = 2 - 6 z^2 and Lap (x y) = -6 x y on the unit sphere
    grid = sphere_grid(6)
    pts = random_points(25, 1)
    f = SurfaceField.from_function(grid, lambda x, y, z: z**2)
    assert_allclose(laplace_beltrami(f).evaluate(pts), 2 - 6 * pts[:, 2] ** 2, atol=1e-12)
    f = SurfaceField.from_function(grid, lambda x, y, z: x * y)
    assert_allclose(laplace_beltrami(f).evaluate(pts), -6 * pts[:, 0] * pts[:, 1], atol=1e-12)


def test_laplacian_by_finite_differences():
    """Lap in spherical coordinates, second-order differences at an interior point."""
    grid = sphere_grid(8)
    c = np.random.default_rng(5).standard_normal(grid.ncoef)
    f = SurfaceField(grid, c)

    def val(t, p):
        return f.evaluate(np.array([[math.sin(t) * math.cos(p), math.sin(t) * math.sin(p), math.cos(t)]]))[0]

    t0, p0, h = 1.1, 0.7, 1e-4
    ft = (val(t0 + h, p0) - val(t0 - h, p0)) / (2 * h)
    ftt = (val(t0 + h, p0) - 2 * val(t0, p0) + val(t0 - h, p0)) / h**2
    fpp = (val(t0, p0 + h) - 2 * val(t0, p0) + val(t0, p0 - h)) / h**2
    fd = ftt + ft * math.cos(t0) / math.sin(t0) + fpp / math.sin(t0) ** 2
    x = np.array([[math.sin(t0) * math.cos(p0), math.sin(t0) * math.sin(p0), math.cos(t0)]])
    assert abs(laplace_beltrami(f).evaluate(x)[0] - fd) < 1e-5 * max(1.0, abs(fd))


def test_dtn_of_harmonic_polynomials():
    # restriction of a degree-l homogeneous harmonic polynomial has N f = l f
    grid = sphere_grid(5)
    for func, l in ((lambda x, y, z: x * y, 2), (lambda x, y, z: x**3 - 3 * x * y**2, 3), (lambda x, y, z: z, 1)):
        f = SurfaceField.from_function(grid, func)
        assert_allclose(dtn(f).coeffs, l * f.coeffs, atol=1e-13)
        assert_allclose(ntd(f).coeffs, f.coeffs / l, atol=1e-13)
        assert_allclose(tilde_dtn(f).coeffs, (l + 1) * f.coeffs, atol=1e-13)


def test_ntd_kills_constants():
    grid = sphere_grid(4)
    assert np.all(ntd(SurfaceField.constant(grid, 2.5)).coeffs == 0)


def test_ntd_laplacian_identity_and_failure():
    grid = sphere_grid(10)
    f = SurfaceField(grid, np.random.default_rng(2).standard_normal(grid.ncoef))
    closed = ntd_of_laplacian_identity(f)
    assert_allclose(ntd(laplace_beltrami(f)).coeffs, closed.coeffs, atol=1e-12)
    with pytest.raises(ConsistencyError):
        ntd_of_laplacian_identity(f, tol=-1.0)


@settings(max_examples=40, deadline=None)
@given(coeff_lists, coeff_lists)
def test_dtn_self_adjoint_and_nonnegative(a, b):
    grid = sphere_grid(6)
    f, g = coeff_field(grid, a), coeff_field(grid, b)
    lhs, rhs = dtn(f).inner(g), f.inner(dtn(g))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
    assert dtn(f).inner(f) >= -1e-10
    assert laplace_beltrami(f).inner(f) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(coeff_lists)
def test_tilde_dtn_is_dtn_plus_fluctuation(a):
    grid = sphere_grid(6)
    f = coeff_field(grid, a)
    expected = dtn(f) + (f - f.mean())
    assert_allclose(tilde_dtn(f).coeffs, expected.coeffs, atol=1e-10)


def test_pointwise_product_against_fine_quadrature():
    """Product of two degree-3 fields is degree 6: project with a scipy basis
    on an independent, finer Gauss grid."""
    L = 6
    grid = sphere_grid(L)
    rng = np.random.default_rng(8)
    a = np.zeros(grid.ncoef)
    b = np.zeros(grid.ncoef)
    a[: n_coeffs(3)] = rng.standard_normal(n_coeffs(3))
    b[: n_coeffs(3)] = rng.standard_normal(n_coeffs(3))
    f, g = SurfaceField(grid, a), SurfaceField(grid, b)
    prod = pointwise_nonlinear(lambda x, y: x * y, f, g)
    nodes, W = gauss_grid(2 * L)
    S = basis_matrix(L, nodes)
    ref = S.T @ (W * (S @ a) * (S @ b))
    assert_allclose(prod.coeffs, ref, atol=1e-12)


def test_pointwise_nonlinear_rejects_domain_errors():
    grid = sphere_grid(4)
    f = SurfaceField.from_function(grid, lambda x, y, z: z)
    with pytest.raises(DomainError):
        pointwise_nonlinear(lambda u: 1.0 / np.where(np.abs(u) < 2, 0.0, u), f)
    with pytest.raises(DomainError):
        pointwise_nonlinear(lambda u: np.log(u - 5.0), f)


def test_field_arithmetic_and_errors():
    grid = sphere_grid(4)
    f = SurfaceField.from_function(grid, lambda x, y, z: 1 + z)
    assert math.isclose((f + 2).mean(), 3.0, rel_tol=1e-14)
    assert math.isclose((2 * f - f).integral(), f.integral(), rel_tol=1e-14)
    assert math.isclose(f.norm() ** 2, FOUR_PI * (1 + 1 / 3), rel_tol=1e-13)
    with pytest.raises(FieldFormatError):
        f + SurfaceField.constant(sphere_grid(5), 1.0)
    with pytest.raises(FieldFormatError):
        SurfaceField(grid, np.zeros(3))
    with pytest.raises(TypeError):
        f * f


def test_sphere_minimum_of_linear_function():
    # min of z - 0.3 x over the sphere is -sqrt(1.09)
    grid = sphere_grid(8)
    f = SurfaceField.from_function(grid, lambda x, y, z: z - 0.3 * x)
    val, x = f.minimum()
    assert abs(val + math.sqrt(1.09)) < 1e-9
    assert_allclose(x, np.array([0.3, 0, -1]) / math.sqrt(1.09), atol=1e-4)
    val, _ = f.maximum()
    assert abs(val - math.sqrt(1.09)) < 1e-9


def test_sphere_minimum_at_pole():
    grid = sphere_grid(6)
    # no grid node sits on the pole, the polish has to find it
    val, pt = sphere_minimum(lambda p: p[:, 2], grid.nodes[..., 2], grid)
    assert abs(val + 1) < 1e-12
    assert abs(pt[2] + 1) < 1e-12


def test_node_operator_identities():
    grid = sphere_grid(8)
    lap = node_operator(grid, "laplace_beltrami")
    T = node_operator(grid, "ntd")
    N = node_operator(grid, "dtn")
    Nt = node_operator(grid, "tilde_dtn")
    assert_allclose(T @ lap, -Nt, atol=1e-11)
    assert_allclose(N @ Nt, -lap, atol=1e-10)
    # self-adjoint in the quadrature inner product
    W = grid.weights.ravel()
    assert_allclose(W[:, None] * lap, (W[:, None] * lap).T, atol=1e-12)
    # band-limited input: node operator agrees with the spectral symbol
    f = SurfaceField(grid, np.random.default_rng(4).standard_normal(grid.ncoef))
    assert_allclose(lap @ f.values.ravel(), laplace_beltrami(f).values.ravel(), atol=1e-11)
    with pytest.raises(ValueError):
        node_operator(grid, "gradient")


def test_node_laplacian_against_scipy_construction():
    from oracles import node_operator as oracle_node_operator

    grid = sphere_grid(6)
    nodes, W = gauss_grid(6)
    ref = oracle_node_operator(6, lambda l: -l * (l + 1.0), -7.0 * 8.0, nodes, W)
    assert_allclose(node_operator(grid, "laplace_beltrami"), ref, atol=1e-11)
