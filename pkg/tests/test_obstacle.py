import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cellpol.errors import ConsistencyError, DomainError
from cellpol.model import (
    ModelParams,
    axisymmetric_signal,
    constant_g_signal,
    manufactured_critical_mass,
    manufactured_signal,
    manufactured_u_star,
)
from cellpol.obstacle import (
    adjoint_kernel,
    alpha_star_Dinf,
    alpha_star_finiteD,
    critical_mass_Dinf,
    critical_mass_finiteD,
    energy_Dinf,
    limit_solution,
    localization_metrics,
    reconstruct_vw_finiteD,
    solve_for_mass_Dinf,
    solve_for_mass_finiteD,
    solve_obstacle_Dinf,
    solve_obstacle_finiteD,
)
from cellpol.spectral import FOUR_PI, sphere_grid

from oracles import enumerate_obstacle, enumerate_obstacle_mass, gauss_grid, obstacle_matrix


@pytest.fixture(scope="module")
def axisym8():
    sig = axisymmetric_signal(sphere_grid(8), 0.5, 0.3)
    return sig, critical_mass_Dinf(sig)


@pytest.fixture(scope="module")
def manufactured16():
    sig = manufactured_signal(sphere_grid(16), 0.05, 0.5)
    return sig, critical_mass_Dinf(sig)


def weighted_l2(x, W):
    return math.sqrt(np.sum(W * x * x))


def test_alpha_star_is_ratio_of_integrals(axisym8):
    # g = 0.5 + 0.3 z has int g = 2 pi, int (1 - g) = 2 pi
    sig, rep = axisym8
    assert abs(alpha_star_Dinf(sig) - 1.0) < 1e-13
    assert abs(rep.alpha_star - 1.0) < 1e-13
    assert abs(sig.alpha0 - 0.2 / 0.8) < 1e-12


def test_manufactured_critical_quantities(manufactured16):
    sig, rep = manufactured16
    assert abs(rep.alpha_star - 0.5) < 1e-12
    assert abs(rep.m_star - manufactured_critical_mass(0.05)) < 1e-10
    u_exact, _ = manufactured_u_star(0.05)
    x, y, z = np.moveaxis(sig.grid.nodes, -1, 0)
    assert_allclose(rep.u_star.u_nodes, u_exact(x, y, z), atol=1e-10)
    assert rep.residuals["solvability"] < 1e-12
    assert rep.residuals["equation"] < 1e-10
    assert abs(rep.residuals["min_u_star"]) < 1e-12


def test_manufactured_critical_mass_value():
    assert math.isclose(manufactured_critical_mass(0.05), 4 * math.pi / 15, rel_tol=1e-15)


def test_above_critical_mass_adds_a_constant(manufactured16):
    sig, rep = manufactured16
    sol = solve_for_mass_Dinf(1.2 * rep.m_star, sig, rep)
    d = sol.u_nodes - rep.u_star.u_nodes
    assert np.ptp(d) < 1e-14
    assert abs(d.mean() - 0.2 * rep.m_star / FOUR_PI) < 1e-14
    assert sol.alpha == rep.alpha_star
    assert_allclose(sol.xi_nodes, 1.0, atol=1e-12)


def test_below_critical_mass_polarizes(manufactured16):
    sig, rep = manufactured16
    sol = solve_for_mass_Dinf(0.5 * rep.m_star, sig, rep)
    assert sol.converged
    assert sol.polarized
    assert sol.inactive_fraction > 0.05
    assert sig.alpha0 < sol.alpha < rep.alpha_star
    assert abs(sol.mass - 0.5 * rep.m_star) < 1e-6 * rep.m_star
    assert sol.kkt_residual < 1e-10
    assert sol.xi_nodes.min() >= -1e-10 and sol.xi_nodes.max() <= 1 + 1e-10


@pytest.mark.parametrize("ell", [0.0, 1.0])
def test_matches_enumerated_active_sets(ell):
    """Axisymmetric data: the active set is a union of latitude rings, so
    brute force over all 2**nlat unions gives an independent solution."""
    from cellpol.experiments import obstacle_cases

    sig, rep, cases = obstacle_cases(L=8, fractions=(0.3, 0.7), ell=ell)
    nodes, W = gauss_grid(8)
    g = sig.g_at(nodes)
    K = obstacle_matrix(8, nodes, W, g, ell)
    nlon = 18
    rings = [list(range(i * nlon, (i + 1) * nlon)) for i in range(9)]
    for m, sol in cases:
        b = (1 - g) - sol.alpha * g
        sols = enumerate_obstacle(K, b, rings)
        assert len(sols) == 1
        ref = sols[0]
        assert weighted_l2(sol.u_nodes.ravel() - ref, W) < 1e-6
        assert abs(np.sum(W * ref) - m) < 1e-5 * m


@pytest.mark.parametrize("ell", [0.0, 1.0])
def test_mass_constrained_enumeration_above_and_below_critical(ell):
    """The multiplier is an unknown of the oracle, so above m* it picks the
    constant shift of u* fixed by the mass."""
    from cellpol.experiments import obstacle_cases

    sig, rep, cases = obstacle_cases(L=8, fractions=(0.5, 1.3), ell=ell)
    nodes, W = gauss_grid(8)
    g = sig.g_at(nodes)
    K = obstacle_matrix(8, nodes, W, g, ell)
    rings = [list(range(i * 18, (i + 1) * 18)) for i in range(9)]
    for m, sol in cases:
        (ref, alpha), = enumerate_obstacle_mass(K, g, W, m, rings)
        assert weighted_l2(sol.u_nodes.ravel() - ref, W) < 1e-6
        assert abs(alpha - sol.alpha) < 1e-6
    assert abs(cases[1][1].alpha - rep.alpha_star) < 1e-12


def test_matches_cvxopt_quadratic_program(axisym8):
    """ell = 0: the problem is min 1/2 u'WKu + (Wb)'u over u >= 0."""
    from cvxopt import matrix, solvers

    sig, rep = axisym8
    grid = sig.grid
    nodes, W = gauss_grid(8)
    g = sig.g_at(nodes)
    K = obstacle_matrix(8, nodes, W, g)
    alpha = 0.5 * (sig.alpha0 + rep.alpha_star)
    b = (1 - g) - alpha * g
    P = W[:, None] * K
    P = 0.5 * (P + P.T)
    n = len(W)
    solvers.options.update({"show_progress": False, "abstol": 1e-13, "reltol": 1e-13, "feastol": 1e-13})
    out = solvers.qp(matrix(P), matrix(W * b), matrix(-np.eye(n)), matrix(np.zeros(n)))
    ref = np.array(out["x"]).ravel()
    sol = solve_obstacle_Dinf(alpha, sig)
    assert weighted_l2(sol.u_nodes.ravel() - ref, W) < 1e-6
    assert grid.n_nodes == n


def test_energy_is_minimal_under_feasible_perturbations(axisym8):
    sig, rep = axisym8
    alpha = 0.5 * (sig.alpha0 + rep.alpha_star)
    sol = solve_obstacle_Dinf(alpha, sig)
    u = sol.u_nodes.ravel()
    e0 = energy_Dinf(u, alpha, sig)
    rng = np.random.default_rng(0)
    for _ in range(50):
        cand = np.maximum(u + 1e-3 * rng.standard_normal(u.size), 0.0)
        assert energy_Dinf(cand, alpha, sig) >= e0 - 1e-14


def test_mass_increases_with_alpha(axisym8):
    sig, rep = axisym8
    alphas = np.linspace(sig.alpha0, rep.alpha_star, 7)[1:-1]
    masses = [solve_obstacle_Dinf(a, sig).mass for a in alphas]
    assert all(b > a for a, b in zip(masses, masses[1:]))
    assert solve_obstacle_Dinf(sig.alpha0, sig).mass == 0.0


def test_alpha_above_critical_is_rejected(axisym8):
    sig, rep = axisym8
    with pytest.raises(DomainError):
        solve_obstacle_Dinf(rep.alpha_star + 1e-3, sig)
    with pytest.raises(DomainError):
        solve_for_mass_Dinf(-1.0, sig, rep)


def test_rate_rescaling_is_covariant(axisym8):
    """With a4 = 2 the limit is twice the a4 = 1 solution of half the mass."""
    sig, rep = axisym8
    m = 0.4 * rep.m_star
    one = limit_solution(ModelParams(a4=1.0, D=math.inf, mass=m), sig)
    two = limit_solution(ModelParams(a4=2.0, D=math.inf, mass=2 * m), sig)
    assert_allclose(two.u_nodes, 2 * one.u_nodes, atol=1e-12)
    assert math.isclose(two.alpha, 2 * one.alpha, rel_tol=1e-12)
    assert np.array_equal(two.active, one.active)


def test_empty_active_set_has_no_localization(axisym8):
    sig, _ = axisym8
    sol = solve_obstacle_Dinf(sig.alpha0, sig)
    assert not localization_metrics(sol, sig)["defined"]


def test_localization_identity_on_a_polarized_state(axisym8):
    sig, rep = axisym8
    sol = solve_for_mass_Dinf(0.3 * rep.m_star, sig, rep)
    lm = localization_metrics(sol, sig)
    assert lm["defined"]
    assert 0 < lm["support_radius"] < math.pi
    assert lm["alpha_gap"] > 0
    assert lm["mean_identity_residual"] < 1e-8


def test_constant_signal_has_constant_adjoint_kernel():
    sig = constant_g_signal(sphere_grid(6), 0.4)
    ker = adjoint_kernel(sig, 1.0)
    assert_allclose(ker.psi_nodes, 1.0, atol=1e-10)
    assert abs(alpha_star_finiteD(sig, 1.0, ker) - 0.6 / 0.4) < 1e-10
    assert critical_mass_Dinf(sig).m_star < 1e-12


def test_adjoint_kernel_properties(manufactured16):
    sig, rep_inf = manufactured16
    ker = adjoint_kernel(sig, 1.0)
    assert ker.residual < 1e-10
    assert ker.sign_definite and not ker.degenerate
    assert abs(np.sum(sig.grid.weights * ker.psi_nodes) - FOUR_PI) < 1e-10
    small = critical_mass_finiteD(sig, 1e-4)
    assert abs(small.alpha_star - rep_inf.alpha_star) < 1e-4
    with pytest.raises(ValueError):
        adjoint_kernel(sig, 0.0)


def test_finite_ell_dichotomy_and_reconstruction():
    sig = manufactured_signal(sphere_grid(10), 0.05, 0.5)
    ell = 1.0
    rep = critical_mass_finiteD(sig, ell)
    assert rep.residuals["equation"] < 1e-9
    above = solve_for_mass_finiteD(1.2 * rep.m_star, sig, ell, rep)
    assert np.ptp(above.u_nodes - rep.u_star.u_nodes) < 1e-12
    below = solve_for_mass_finiteD(0.5 * rep.m_star, sig, ell, rep)
    assert below.converged and below.valid and below.polarized
    assert below.kkt_residual < 1e-9
    assert below.xi_nodes.min() >= -1e-8
    p = ModelParams(a4=1.0, a5=1.0, a6=1.0, D=1.0 / ell, mass=0.5 * rep.m_star)
    rec = reconstruct_vw_finiteD(below, p, sig)
    for key in ("obs1", "obs2", "obs4", "w_identity", "w_bar"):
        assert rec.residuals[key] < 1e-8, key
    assert rec.residuals["min_v"] >= -1e-10
    with pytest.raises(ConsistencyError):
        reconstruct_vw_finiteD(below, p.with_(D=7.0), sig)


def test_finite_ell_zero_below_threshold(axisym8):
    sig, _ = axisym8
    sol = solve_obstacle_finiteD(0.9 * sig.alpha0, sig, 1.0)
    assert np.all(sol.u_nodes == 0)
