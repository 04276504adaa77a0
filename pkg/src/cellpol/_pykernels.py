"""Pure-numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` one-to-one and are used when the compiled
extension is unavailable or when ``CELLPOL_PURE_PYTHON=1``.
"""

import numpy as np


def tridiag_solve(lower, diag, upper, rhs):
    """Solve a batch of tridiagonal systems by the Thomas algorithm.

    All arguments have shape ``(nsys, n)``.  Row ``i`` of system ``k`` reads
    ``lower[k,i] x[i-1] + diag[k,i] x[i] + upper[k,i] x[i+1] = rhs[k,i]``;
    ``lower[:, 0]`` and ``upper[:, -1]`` are ignored.
    """
    lower = np.asarray(lower, dtype=float)
    diag = np.asarray(diag, dtype=float)
    upper = np.asarray(upper, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = diag.shape[1]
    cp = np.empty_like(diag)
    dp = np.empty_like(rhs)
    denom = diag[:, 0]
    cp[:, 0] = upper[:, 0] / denom
    dp[:, 0] = rhs[:, 0] / denom
    for i in range(1, n):
        denom = diag[:, i] - lower[:, i] * cp[:, i - 1]
        cp[:, i] = upper[:, i] / denom
        dp[:, i] = (rhs[:, i] - lower[:, i] * dp[:, i - 1]) / denom
    x = np.empty_like(rhs)
    x[:, -1] = dp[:, -1]
    for i in range(n - 2, -1, -1):
        x[:, i] = dp[:, i] - cp[:, i] * x[:, i + 1]
    return x


def mm_reaction(U, v, c, eps, a1, a2, a3, a4):
    """Activation minus inactivation with inputs clipped at zero.

    ``(eps a1 + eps a2 U/(eps a3 + U) + c) v - a4 U/(eps + U)``
    """
    Up = np.maximum(U, 0.0)
    vp = np.maximum(v, 0.0)
    return (eps * a1 + eps * a2 * Up / (eps * a3 + Up) + c) * vp - a4 * Up / (eps + Up)


def mm_reaction_partials(U, v, c, eps, a1, a2, a3, a4):
    """Reaction value and its partial derivatives in ``U`` and ``v``."""
    U = np.asarray(U, dtype=float)
    v = np.asarray(v, dtype=float)
    Up = np.maximum(U, 0.0)
    vp = np.maximum(v, 0.0)
    da = eps * a3 + Up
    db = eps + Up
    rate = eps * a1 + eps * a2 * Up / da + c
    f = rate * vp - a4 * Up / db
    dfdU = np.where(U > 0.0, eps * a2 * eps * a3 / (da * da) * vp - a4 * eps / (db * db), 0.0)
    dfdv = np.where(v > 0.0, rate, 0.0)
    return f, dfdU, dfdv
