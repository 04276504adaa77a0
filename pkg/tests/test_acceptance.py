"""Acceptance criteria, one test each.

Every test prints a single ``criterion N ... PASS/FAIL`` line (visible with
or without ``-s``) before asserting.
"""

import math
import time

import numpy as np
import pytest

from cellpol import experiments as ex

from oracles import enumerate_obstacle_mass, gauss_grid, homogeneous_fsolve, obstacle_matrix


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:>2} {title:<32} {'PASS' if passed else 'FAIL'}  {detail}")

    return emit


def test_criterion_01_operator_conformance(report):
    r = ex.operator_conformance(L=16, n_random=20)
    ok = r["passed"] and r["seconds"] < 5
    report(1, "operator conformance", ok, f"max error {r['max_error']:.2e}, {r['seconds']:.1f} s")
    assert ok


def test_criterion_02_dtn_crosscheck(report):
    t0 = time.perf_counter()
    r = ex.dtn_crosscheck(L=8, nrs=(32, 64, 128))
    seconds = time.perf_counter() - t0
    ok = r["passed"] and seconds < 10
    report(2, "DtN cross-check", ok, "orders " + ", ".join(f"{o:.3f}" for o in r["orders"]) + f", {seconds:.2f} s")
    assert ok


def test_criterion_03_conservation(report):
    r = ex.conservation_run(L=16, nr=64, dt=1e-3, T=10.0)
    ok = r["passed"] and r["seconds"] < 120
    report(3, "dynamics conservation", ok,
           f"drift {r['mass_drift']:.2e}, min {min(r['min_u'], r['min_v'], r['min_w']):.3e}, {r['seconds']:.0f} s")
    assert ok


def test_criterion_04_homogeneous_oracle(report):
    recs = ex.homogeneous_steady(kappa=1.5)
    worst = 0.0
    for rec in recs:
        p = rec["params"]
        U, v, w = homogeneous_fsolve(p, 1.5)
        worst = max(worst, abs(rec["U"] - U), abs(rec["v"] - v), abs(rec["w"] - w), rec["variation"])
    ok = worst < 1e-8 and all(r["converged"] for r in recs)
    ok = ok and {r["params"].infinite_diffusion for r in recs} == {True, False}
    report(4, "homogeneous oracle", ok, f"max deviation {worst:.2e} over {len(recs)} regimes")
    assert ok


def test_criterion_05_manufactured_critical_mass(report):
    r = ex.manufactured_critical(L=32)
    ok = r["passed"] and r["seconds"] < 30
    report(5, "manufactured critical mass", ok,
           f"m* {r['m_star']:.9f} (rel {r['m_star_rel_error']:.1e}), alpha* err {r['alpha_star_error']:.1e}, "
           f"u* err {r['u_star_linf_error']:.1e}, {r['seconds']:.1f} s")
    assert ok


def test_criterion_06_critical_dichotomy(report):
    r = ex.critical_dichotomy(L=32)
    report(6, "critical-mass dichotomy", r["passed"],
           f"spread {r['above_spread']:.1e}, inactive {r['below_inactive_fraction']:.3f}, "
           f"alpha {r['below_alpha']:.4f} < {r['alpha_star']:.4f}")
    assert r["passed"]


def test_criterion_07_eps_continuation(report):
    r = ex.eps_continuation(L=32)
    report(7, "eps continuation", r["passed"], "L1 " + ", ".join(f"{e:.4f}" for e in r["l1_errors"]))
    assert r["passed"]


def test_criterion_08_D_continuation(report):
    r = ex.D_continuation(L=16)
    report(8, "D continuation", r["passed"],
           "w dev " + ", ".join(f"{e:.2e}" for e in r["w_deviation"])
           + "; dist " + ", ".join(f"{e:.2e}" for e in r["distance_to_Dinf"]))
    assert r["passed"]


def test_criterion_09_localization(report):
    r = ex.localization(L=32)
    report(9, "localization", r["passed"],
           f"gap ratio {r['gap_ratio']:.4f} (needs < 0.05), radii decreasing {r['radius_decreasing']}, "
           f"identity {max(r['mean_identity_residual']):.1e}")
    assert r["radius_decreasing"]
    assert max(r["mean_identity_residual"]) < 1e-6
    assert r["gap_ratio"] < 0.05


def test_criterion_10_finite_ell(report):
    r = ex.finite_ell_theory(L=16, ell=1.0, ell_small=1e-4)
    report(10, "finite-ell theory", r["passed"],
           f"psi res {r['psi_residual']:.1e}, small-ell gap {r['small_ell_gap']:.1e}, kkt {r['kkt_residual']:.1e}, "
           f"xi [{r['xi_range'][0]:.3g}, {r['xi_range'][1]:.6g}]")
    assert r["passed"]


def test_criterion_11_dense_oracle(report):
    nodes, W = gauss_grid(8)
    nlon = 18
    rings = [list(range(i * nlon, (i + 1) * nlon)) for i in range(9)]
    worst = 0.0
    unique = True
    for ell in (0.0, 1.0):
        sig, rep, cases = ex.obstacle_cases(L=8, ell=ell)
        g = sig.g_at(nodes)
        K = obstacle_matrix(8, nodes, W, g, ell)
        for m, sol in cases:
            sols = enumerate_obstacle_mass(K, g, W, m, rings)
            unique &= len(sols) == 1
            for ref, alpha in sols:
                worst = max(worst, math.sqrt(np.sum(W * (sol.u_nodes.ravel() - ref) ** 2)), abs(alpha - sol.alpha))
    ok = unique and worst < 1e-6
    report(11, "dense-oracle equivalence", ok, f"max L2 / multiplier difference {worst:.2e}")
    assert ok
