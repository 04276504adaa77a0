import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.linalg import solve_banded

from cellpol import _pykernels

try:
    from cellpol import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

BACKENDS = [pytest.param(_pykernels, id="python")]
if _ckernels is not None:
    BACKENDS.append(pytest.param(_ckernels, id="cython"))


def random_tridiag(rng, nsys, n):
    lower = rng.uniform(-1, 1, (nsys, n))
    upper = rng.uniform(-1, 1, (nsys, n))
    diag = np.abs(lower) + np.abs(upper) + rng.uniform(0.5, 2, (nsys, n))
    rhs = rng.standard_normal((nsys, n))
    return lower, diag, upper, rhs


@pytest.mark.parametrize("mod", BACKENDS)
def test_tridiag_matches_scipy_banded(mod):
    rng = np.random.default_rng(0)
    lower, diag, upper, rhs = random_tridiag(rng, 7, 40)
    x = mod.tridiag_solve(lower, diag, upper, rhs)
    for k in range(7):
        ab = np.zeros((3, 40))
        ab[0, 1:] = upper[k, :-1]
        ab[1] = diag[k]
        ab[2, :-1] = lower[k, 1:]
        assert_allclose(x[k], solve_banded((1, 1), ab, rhs[k]), rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("mod", BACKENDS)
def test_tridiag_single_unknown(mod):
    x = mod.tridiag_solve(np.zeros((2, 1)), np.array([[2.0], [4.0]]), np.zeros((2, 1)), np.array([[1.0], [1.0]]))
    assert_allclose(x, [[0.5], [0.25]])


@pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")
def test_backends_agree_on_reaction():
    rng = np.random.default_rng(1)
    U = rng.uniform(-0.1, 2, 500)
    v = rng.uniform(-0.1, 2, 500)
    c = rng.uniform(0, 1, 500)
    args = (0.3, 1.0, 2.0, 0.5, 1.5)
    assert_allclose(_ckernels.mm_reaction(U, v, c, *args), _pykernels.mm_reaction(U, v, c, *args), rtol=1e-14)
    for a, b in zip(_ckernels.mm_reaction_partials(U, v, c, *args), _pykernels.mm_reaction_partials(U, v, c, *args)):
        assert_allclose(a, b, rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("mod", BACKENDS)
def test_reaction_value(mod):
    # (eps a1 + eps a2 U/(eps a3 + U) + c) v - a4 U/(eps + U) at U = v = 1
    eps, a1, a2, a3, a4, c = 0.5, 1.0, 2.0, 3.0, 4.0, 0.25
    expected = (eps * a1 + eps * a2 / (eps * a3 + 1) + c) - a4 / (eps + 1)
    got = mod.mm_reaction(np.array([1.0]), np.array([1.0]), np.array([c]), eps, a1, a2, a3, a4)
    assert_allclose(got, [expected], rtol=1e-15)


@pytest.mark.parametrize("mod", BACKENDS)
@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 3), st.floats(0.01, 3), st.floats(0, 2), st.floats(0.05, 1))
def test_reaction_partials_by_central_differences(mod, U, v, c, eps):
    args = (eps, 1.2, 0.7, 1.3, 0.9)
    h = 1e-6
    f, fU, fv = mod.mm_reaction_partials(np.array([U]), np.array([v]), np.array([c]), *args)
    R = lambda a, b: mod.mm_reaction(np.array([a]), np.array([b]), np.array([c]), *args)[0]
    assert_allclose(f[0], R(U, v), rtol=1e-14)
    assert_allclose(fU[0], (R(U + h, v) - R(U - h, v)) / (2 * h), rtol=1e-6, atol=1e-8)
    assert_allclose(fv[0], (R(U, v + h) - R(U, v - h)) / (2 * h), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("mod", BACKENDS)
def test_reaction_clips_negative_inputs(mod):
    f = mod.mm_reaction(np.array([-1.0, 0.0]), np.array([-2.0, 0.0]), np.array([1.0, 1.0]), 1.0, 1, 1, 1, 1)
    assert_allclose(f, [0.0, 0.0])


def test_environment_switch_selects_numpy_fallback():
    import os
    import subprocess
    import sys

    env = dict(os.environ, CELLPOL_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import cellpol.kernels as k; print(k.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"
