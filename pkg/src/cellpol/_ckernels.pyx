# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def tridiag_solve(lower, diag, upper, rhs):
    """Batched Thomas algorithm; see ``_pykernels.tridiag_solve``."""
    cdef const double[:, ::1] a = np.ascontiguousarray(lower, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(diag, dtype=np.float64)
    cdef const double[:, ::1] c = np.ascontiguousarray(upper, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(rhs, dtype=np.float64)
    cdef Py_ssize_t nsys = b.shape[0]
    cdef Py_ssize_t n = b.shape[1]
    out = np.empty((nsys, n), dtype=np.float64)
    cdef double[:, ::1] x = out
    cdef double[::1] cp = np.empty(n, dtype=np.float64)
    cdef double[::1] dp = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t k, i
    cdef double denom
    for k in range(nsys):
        denom = b[k, 0]
        cp[0] = c[k, 0] / denom
        dp[0] = d[k, 0] / denom
        for i in range(1, n):
            denom = b[k, i] - a[k, i] * cp[i - 1]
            cp[i] = c[k, i] / denom
            dp[i] = (d[k, i] - a[k, i] * dp[i - 1]) / denom
        x[k, n - 1] = dp[n - 1]
        for i in range(n - 2, -1, -1):
            x[k, i] = dp[i] - cp[i] * x[k, i + 1]
    return out


def mm_reaction(U, v, c, double eps, double a1, double a2, double a3, double a4):
    """Clipped Michaelis-Menten reaction; see ``_pykernels.mm_reaction``."""
    shape = np.shape(U)
    cdef const double[::1] u_ = np.ascontiguousarray(U, dtype=np.float64).ravel()
    cdef const double[::1] v_ = np.ascontiguousarray(v, dtype=np.float64).ravel()
    cdef const double[::1] c_ = np.ascontiguousarray(np.broadcast_to(c, shape), dtype=np.float64).ravel()
    cdef Py_ssize_t n = u_.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] f = out
    cdef Py_ssize_t i
    cdef double up, vp
    for i in range(n):
        up = u_[i] if u_[i] > 0.0 else 0.0
        vp = v_[i] if v_[i] > 0.0 else 0.0
        f[i] = (eps * a1 + eps * a2 * up / (eps * a3 + up) + c_[i]) * vp - a4 * up / (eps + up)
    return out.reshape(shape)


def mm_reaction_partials(U, v, c, double eps, double a1, double a2, double a3, double a4):
    """Reaction and partial derivatives; see ``_pykernels.mm_reaction_partials``."""
    shape = np.shape(U)
    cdef const double[::1] u_ = np.ascontiguousarray(U, dtype=np.float64).ravel()
    cdef const double[::1] v_ = np.ascontiguousarray(v, dtype=np.float64).ravel()
    cdef const double[::1] c_ = np.ascontiguousarray(np.broadcast_to(c, shape), dtype=np.float64).ravel()
    cdef Py_ssize_t n = u_.shape[0]
    f_arr = np.empty(n, dtype=np.float64)
    du_arr = np.empty(n, dtype=np.float64)
    dv_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] f = f_arr
    cdef double[::1] du = du_arr
    cdef double[::1] dv = dv_arr
    cdef Py_ssize_t i
    cdef double up, vp, da, db, rate
    for i in range(n):
        up = u_[i] if u_[i] > 0.0 else 0.0
        vp = v_[i] if v_[i] > 0.0 else 0.0
        da = eps * a3 + up
        db = eps + up
        rate = eps * a1 + eps * a2 * up / da + c_[i]
        f[i] = rate * vp - a4 * up / db
        du[i] = (eps * a2 * eps * a3 / (da * da) * vp - a4 * eps / (db * db)) if u_[i] > 0.0 else 0.0
        dv[i] = rate if v_[i] > 0.0 else 0.0
    return f_arr.reshape(shape), du_arr.reshape(shape), dv_arr.reshape(shape)
