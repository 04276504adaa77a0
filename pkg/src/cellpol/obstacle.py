"""Limiting obstacle problems and the critical-mass machinery.

Unknowns are values at the nodes of the signal's grid.  With
``b = (1 - g) - alpha g`` and the operator ``K = -Lap + ell diag(g) Ntilde``
(``ell = 0`` for the well-mixed cytosol, ``Ntilde f = N f + f - mean f``)
the obstacle problem is the complementarity system::

    u >= 0,   q := K u + b >= 0,   u q = 0.

The multiplier ``xi`` follows from ``(1 - g)(1 - xi) = q``: it equals 1
where ``u > 0`` and the representation value where ``u = 0``.  All
operators act on node values through :func:`~cellpol.spectral.node_operator`,
which applies the spectral symbol on the resolved degrees and a fixed tail
value on the rest; this keeps ``K`` square, nonsingular away from
constants, and self-adjoint in the quadrature inner product when
``ell = 0``.

The rate ``a4`` is set to 1 throughout; :func:`rescale` restores it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .errors import ConsistencyError, ConvergenceError, DomainError
from .model import ModelParams, SignalField
from .spectral import FOUR_PI, SurfaceField, node_operator

TOL_KKT = 1e-10
TOL_MASS = 1e-6
MAX_BISECT = 60


# -- operators ----------------------------------------------------------------


class _Operators:
    """Node-space matrices for a signal and coupling ``ell`` (cached)."""

    def __init__(self, sig: SignalField, ell: float):
        grid = sig.grid
        self.grid = grid
        self.ell = float(ell)
        self.W = grid.weights.ravel().copy()
        self.g = sig.g_nodes(grid).ravel().copy()
        self.lap = node_operator(grid, "laplace_beltrami")
        self.ntilde = node_operator(grid, "tilde_dtn")
        K = -self.lap
        if self.ell > 0:
            K = K + self.ell * self.g[:, None] * self.ntilde
        self.K = np.ascontiguousarray(K)
        self.n = self.W.size
        self.lam_max = (grid.L + 1.0) * (grid.L + 2.0)

    def b(self, alpha: float) -> np.ndarray:
        return (1.0 - self.g) - alpha * self.g

    def q(self, u: np.ndarray, alpha: float) -> np.ndarray:
        return self.K @ u + self.b(alpha)

    def adjoint(self) -> np.ndarray:
        """``-Lap + ell Ntilde diag(g)``, the quadrature adjoint of ``K``."""
        B = -self.lap
        if self.ell > 0:
            B = B + self.ell * self.ntilde * self.g[None, :]
        return B


def _operators(sig: SignalField, ell: float) -> _Operators:
    cache = sig.__dict__.setdefault("_obstacle_ops", {})
    key = (sig.grid.L, float(ell))
    if key not in cache:
        cache[key] = _Operators(sig, ell)
    return cache[key]


# -- results ------------------------------------------------------------------


@dataclass
class ObstacleSolution:
    """Solution ``(u, xi, alpha)`` of an obstacle problem with diagnostics.

    Attributes
    ----------
    u_nodes, xi_nodes : ndarray, shape (nlat, nlon)
        Node values; ``u`` and ``xi`` are their band-limited projections.
    active : ndarray of bool
        Nodes with ``u > tol_active``.
    active_weight : ndarray
        Active fraction of each node's quadrature cell: 1 on active nodes
        and ``(xi - xi_repr)/(1 - xi_repr)`` on contact nodes, where
        ``xi_repr`` is the representation value of ``xi``.  Integrals over
        ``{u > 0}`` use these weights.
    kkt_residual : float
        ``|| min(u, q) ||`` in L2.
    repr_defect : float
        Largest deviation of ``xi`` from its representation value on
        contact nodes.
    """

    u_nodes: np.ndarray
    xi_nodes: np.ndarray
    alpha: float
    regime: str
    ell: float
    active: np.ndarray
    active_weight: np.ndarray
    kkt_residual: float
    repr_defect: float
    grid: object
    converged: bool = True
    valid: bool = True
    iterations: int = 0
    notes: list = field(default_factory=list)

    @property
    def u(self) -> SurfaceField:
        return SurfaceField.from_values(self.grid, self.u_nodes)

    @property
    def xi(self) -> SurfaceField:
        return SurfaceField.from_values(self.grid, self.xi_nodes)

    @property
    def mass(self) -> float:
        return float(np.sum(self.grid.weights * self.u_nodes))

    @property
    def inactive_fraction(self) -> float:
        return float(np.sum(self.grid.weights[~self.active]) / FOUR_PI)

    @property
    def polarized(self) -> bool:
        """Both ``{u > 0}`` and ``{u = 0}`` are nonempty on the grid."""
        return bool(self.active.any() and (~self.active).any())

    def summary(self) -> dict:
        return {
            "alpha": float(self.alpha),
            "mass": self.mass,
            "regime": self.regime,
            "ell": float(self.ell),
            "kkt_residual": float(self.kkt_residual),
            "repr_defect": float(self.repr_defect),
            "inactive_fraction": self.inactive_fraction,
            "polarized": self.polarized,
            "converged": bool(self.converged),
            "valid": bool(self.valid),
            "min_u": float(self.u_nodes.min()),
            "xi_min": float(self.xi_nodes.min()),
            "xi_max": float(self.xi_nodes.max()),
        }


@dataclass
class CriticalMassReport:
    """Critical quantities of a signal in one regime."""

    alpha0: float
    alpha_star: float
    u_star: ObstacleSolution
    m_star: float
    ell: float
    L: int
    residuals: dict
    psi: SurfaceField | None = None
    psi_nodes: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "alpha0": float(self.alpha0),
            "alpha_star": float(self.alpha_star),
            "m_star": float(self.m_star),
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "L": int(self.L),
            "ell": None if self.ell == 0 else float(self.ell),
        }


# -- helpers ------------------------------------------------------------------


def _wnorm(x, W):
    return float(math.sqrt(np.sum(W * x * x)))


def _tol_active(u, scale_mass):
    return 1e-7 * max(float(np.max(u, initial=0.0)), scale_mass / FOUR_PI, 1e-300)


def _finish(ops: _Operators, u: np.ndarray, alpha: float, regime: str, scale_mass: float,
            iterations: int = 0, converged: bool = True, notes=None) -> ObstacleSolution:
    grid = ops.grid
    g = ops.g
    q = ops.q(u, alpha)
    xi = 1.0 - q / (1.0 - g)
    kkt = _wnorm(np.minimum(u, q), ops.W)
    active = u > _tol_active(u, scale_mass)
    # representation value on the contact set
    xi_repr = g * alpha / (1.0 - g)
    if ops.ell > 0:
        xi_repr = g * (alpha - ops.ell * (ops.ntilde @ u)) / (1.0 - g)
    contact = ~active
    defect = float(np.max(np.abs(xi - xi_repr)[contact])) if contact.any() else 0.0
    weight = np.ones_like(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = (xi - xi_repr) / (1.0 - xi_repr)
    weight[contact] = np.where(np.isfinite(frac[contact]), frac[contact], 0.0)
    notes = list(notes or [])
    valid = bool(xi.min() >= -1e-6 and u.min() >= -1e-10)
    if not valid:
        notes.append(f"xi min {xi.min():.3e}, u min {u.min():.3e}")
    shape = grid.shape
    return ObstacleSolution(
        u.reshape(shape), xi.reshape(shape), float(alpha), regime, ops.ell,
        active.reshape(shape), weight.reshape(shape), kkt, defect, grid,
        converged, valid, iterations, notes,
    )


def _projected_gradient(ops: _Operators, alpha: float, u0: np.ndarray, iters: int) -> np.ndarray:
    """Accelerated projected gradient iterations (FISTA) on ``u >= 0``.

    For ``ell = 0`` this minimises ``1/2 <u, K u> + <b, u>`` in the
    quadrature inner product; for ``ell > 0`` it is the projected fixed
    point iteration ``u <- max(0, u - tau q(u))``.
    """
    tau = 1.0 / (ops.lam_max + ops.ell * (ops.grid.L + 2.0))
    b = ops.b(alpha)
    u = np.maximum(u0, 0.0)
    y = u.copy()
    t = 1.0
    for _ in range(iters):
        un = np.maximum(y - tau * (ops.K @ y + b), 0.0)
        tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = un + ((t - 1.0) / tn) * (un - u)
        u, t = un, tn
    return u


def _active_set_newton(ops: _Operators, alpha: float, u0: np.ndarray, max_iter: int = 60):
    """Semismooth Newton on ``min(u, q(u)) = 0`` (primal-dual active set).

    Returns ``(u, converged, iterations)``.
    """
    b = ops.b(alpha)
    u = u0.copy()
    seen = set()
    for it in range(1, max_iter + 1):
        q = ops.K @ u + b
        I = u > q
        key = I.tobytes()
        if key in seen:
            return u, False, it
        seen.add(key)
        un = np.zeros_like(u)
        if I.any():
            KII = ops.K[np.ix_(I, I)]
            if I.all():
                un = np.linalg.lstsq(KII, -b, rcond=None)[0]
            else:
                try:
                    un[I] = sla.solve(KII, -b[I], check_finite=False)
                except sla.LinAlgError:
                    un[I] = np.linalg.lstsq(KII, -b[I], rcond=None)[0]
        qn = ops.K @ un + b
        In = un > qn
        if np.array_equal(In, I):
            return un, True, it
        u = un
    return u, False, max_iter


def _solve_ncp(ops: _Operators, alpha: float, warm: np.ndarray | None, regime: str, scale_mass: float):
    u0 = np.zeros(ops.n) if warm is None else np.asarray(warm, dtype=float).ravel()
    u, ok, its = _active_set_newton(ops, alpha, u0)
    notes = []
    if not ok:
        notes.append("active-set Newton restarted from projected-gradient iterate")
        u0 = _projected_gradient(ops, alpha, u0, 2000)
        u, ok, its2 = _active_set_newton(ops, alpha, u0)
        its += its2
    sol = _finish(ops, u, alpha, regime, scale_mass, its, ok, notes)
    if sol.kkt_residual > 1e-8:
        sol.converged = False
    return sol


def _refined_min(ops: _Operators, u_nodes: np.ndarray) -> float:
    """Minimum of node values and of the band-limited projection on a
    refined grid (with local quadratic polishing)."""
    field_ = SurfaceField.from_values(ops.grid, u_nodes.reshape(ops.grid.shape))
    return min(float(u_nodes.min()), field_.minimum()[0])


def _zero_solution(ops, alpha, regime):
    return _finish(ops, np.zeros(ops.n), alpha, regime, 0.0)


# -- D = infinity ----------------------------------------------------------------


def alpha_star_Dinf(sig: SignalField) -> float:
    """``int (1 - g) / int g`` by grid quadrature."""
    ops = _operators(sig, 0.0)
    return float(np.sum(ops.W * (1.0 - ops.g)) / np.sum(ops.W * ops.g))


def _u_star_nodes(ops: _Operators, alpha_star: float) -> np.ndarray:
    """Solution of ``K u = -b(alpha*)`` with minimum zero."""
    b = ops.b(alpha_star)
    grid = ops.grid
    if ops.ell == 0:
        S = grid.node_matrix()
        A = S.T * ops.W[None, :]
        bc = A @ b
        ls = grid.degrees
        sym = np.zeros_like(bc)
        sym[1:] = 1.0 / (ls[1:] * (ls[1:] + 1.0))
        u = S @ (-sym * bc) - (b - S @ bc) / ops.lam_max
    else:
        n = ops.n
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = ops.K
        M[:n, n] = 1.0
        M[n, :n] = ops.W
        rhs = np.concatenate([-b, [0.0]])
        u = sla.solve(M, rhs)[:n]
    return u - _refined_min(ops, u)


def critical_mass_Dinf(sig: SignalField) -> CriticalMassReport:
    """``alpha0``, ``alpha*``, ``u*`` and ``m*`` for the well-mixed cytosol."""
    ops = _operators(sig, 0.0)
    a_star = alpha_star_Dinf(sig)
    solvability = float(np.sum(ops.W * ops.b(a_star)))
    u = _u_star_nodes(ops, a_star)
    sol = _finish(ops, u, a_star, "Dinf", float(np.sum(ops.W * u)))
    res = {
        "solvability": abs(solvability),
        "equation": _wnorm(ops.K @ u + ops.b(a_star), ops.W),
        "min_u_star": _refined_min(ops, u),
    }
    return CriticalMassReport(sig.alpha0, a_star, sol, sol.mass, 0.0, sig.grid.L, res)


def u_star_Dinf(sig: SignalField) -> SurfaceField:
    """Critical profile: ``-Lap u* = -(1 - g) + alpha* g`` with ``min u* = 0``."""
    return critical_mass_Dinf(sig).u_star.u


def solve_obstacle_Dinf(alpha: float, sig: SignalField, warm=None, report: CriticalMassReport | None = None) -> ObstacleSolution:
    """Obstacle problem for a fixed multiplier ``alpha`` (well-mixed cytosol).

    Minimises ``1/2 int |grad u|^2 + int (1 - g) u - alpha g u`` over
    ``u >= 0``.  ``alpha <= alpha0`` gives ``u = 0``; ``alpha = alpha*``
    returns the critical profile (minimal representative).

    Raises
    ------
    DomainError
        If ``alpha > alpha*`` (the energy is unbounded below).
    """
    ops = _operators(sig, 0.0)
    a_star = alpha_star_Dinf(sig)
    if alpha > a_star * (1 + 1e-12) + 1e-14:
        raise DomainError(f"alpha={alpha:.6g} exceeds alpha*={a_star:.6g}: energy unbounded below")
    if alpha <= sig.alpha0:
        return _zero_solution(ops, alpha, "Dinf")
    if abs(alpha - a_star) <= 1e-12 * max(1.0, a_star):
        rep = report or critical_mass_Dinf(sig)
        return rep.u_star
    scale = float(np.sum(ops.W * warm.ravel())) if warm is not None else 0.0
    return _solve_ncp(ops, alpha, warm, "Dinf", scale)


def energy_Dinf(u_nodes: np.ndarray, alpha: float, sig: SignalField) -> float:
    """Discrete energy ``1/2 <u, -Lap u> + <(1 - g) - alpha g, u>``."""
    ops = _operators(sig, 0.0)
    u = np.asarray(u_nodes, dtype=float).ravel()
    return float(0.5 * np.sum(ops.W * u * (ops.K @ u)) + np.sum(ops.W * ops.b(alpha) * u))


def _solve_for_mass(m, sig, ell, report, solve_alpha, regime):
    if not m > 0:
        raise DomainError("mass must be positive")
    ops = _operators(sig, ell)
    m_star = report.m_star
    if m >= m_star:
        u = report.u_star.u_nodes.ravel() + (m - m_star) / FOUR_PI
        return _finish(ops, u, report.alpha_star, regime, m)
    lo, hi = sig.alpha0, report.alpha_star
    f_lo, f_hi = -m, m_star - m
    warm_lo, warm_hi = None, report.u_star.u_nodes
    best = None
    side = 0
    for it in range(MAX_BISECT):
        # Illinois-modified regula falsi, falling back to bisection
        a = hi - f_hi * (hi - lo) / (f_hi - f_lo) if f_hi != f_lo else 0.5 * (lo + hi)
        if not lo < a < hi or (hi - lo) < 1e-14 * max(1.0, hi):
            a = 0.5 * (lo + hi)
        warm = warm_hi if warm_hi is not None else warm_lo
        sol = solve_alpha(a, warm)
        f = sol.mass - m
        if best is None or abs(f) < abs(best.mass - m):
            best = sol
        if abs(f) < TOL_MASS * m:
            sol.iterations = it + 1
            return sol
        if f > 0:
            hi, f_hi, warm_hi = a, f, sol.u_nodes
            if side == 1:
                f_lo *= 0.5
            side = 1
        else:
            lo, f_lo, warm_lo = a, f, sol.u_nodes
            if side == -1:
                f_hi *= 0.5
            side = -1
        if hi - lo < 1e-15 * max(1.0, hi):
            break
    best.converged = False
    best.notes.append("mass bisection did not meet tolerance")
    return best


def solve_for_mass_Dinf(m: float, sig: SignalField, report: CriticalMassReport | None = None) -> ObstacleSolution:
    """Obstacle solution with ``int u = m`` (well-mixed cytosol).

    For ``m >= m*`` this is ``u* + (m - m*)/|sphere|`` with ``xi = 1`` and
    ``alpha = alpha*``; otherwise ``alpha`` is found in ``(alpha0, alpha*)``
    using that the mass is increasing in ``alpha``.
    """
    report = report or critical_mass_Dinf(sig)
    return _solve_for_mass(m, sig, 0.0, report, lambda a, w: solve_obstacle_Dinf(a, sig, w, report), "Dinf")


# -- finite ell -------------------------------------------------------------


@dataclass
class AdjointKernel:
    psi_nodes: np.ndarray
    psi: SurfaceField
    residual: float
    sigma: tuple
    degenerate: bool
    sign_definite: bool


def adjoint_kernel(sig: SignalField, ell: float) -> AdjointKernel:
    """Null vector of ``-Lap psi + ell Ntilde(g psi)`` by dense SVD.

    The SVD is taken in the quadrature inner product.  The sign is fixed
    so that ``psi >= 0`` and the scale so that ``int psi = 4 pi``.  A warning
    is issued when the two smallest singular values are within a factor 10.
    """
    if not ell > 0:
        raise ValueError("ell must be positive")
    ops = _operators(sig, ell)
    sw = np.sqrt(ops.W)
    B = ops.adjoint()
    Bs = sw[:, None] * B / sw[None, :]
    _, s, vt = sla.svd(Bs, lapack_driver="gesvd")
    psi = vt[-1] / sw
    total = float(np.sum(ops.W * psi))
    psi = psi * (FOUR_PI / total)
    degenerate = bool(s[-2] < 10.0 * s[-1])
    if degenerate:
        warnings.warn("adjoint kernel may not be one-dimensional", RuntimeWarning, stacklevel=2)
    res = _wnorm(B @ psi, ops.W) / _wnorm(psi, ops.W)
    sign_def = bool(psi.min() >= -1e-10 * np.abs(psi).max())
    grid = sig.grid
    return AdjointKernel(psi.reshape(grid.shape), SurfaceField.from_values(grid, psi.reshape(grid.shape)),
                         res, (float(s[-1]), float(s[-2])), degenerate, sign_def)


def adjoint_null_psi(sig: SignalField, ell: float) -> SurfaceField:
    return adjoint_kernel(sig, ell).psi


def alpha_star_finiteD(sig: SignalField, ell: float, kernel: AdjointKernel | None = None) -> float:
    """``int psi (1 - g) / int psi g``."""
    ops = _operators(sig, ell)
    kernel = kernel or adjoint_kernel(sig, ell)
    psi = kernel.psi_nodes.ravel()
    den = float(np.sum(ops.W * psi * ops.g))
    if not den > 0:
        raise ConsistencyError("int psi g must be positive")
    return float(np.sum(ops.W * psi * (1.0 - ops.g)) / den)


def critical_mass_finiteD(sig: SignalField, ell: float) -> CriticalMassReport:
    """``alpha0``, ``alpha*(ell)``, ``psi``, ``u*`` and ``m*`` for coupling ``ell``."""
    ops = _operators(sig, ell)
    ker = adjoint_kernel(sig, ell)
    a_star = alpha_star_finiteD(sig, ell, ker)
    b = ops.b(a_star)
    psi = ker.psi_nodes.ravel()
    orth = abs(float(np.sum(ops.W * psi * b))) / FOUR_PI
    if orth > 1e-9:
        raise ConsistencyError(f"solvability residual {orth:.3e} exceeds 1e-9")
    u = _u_star_nodes(ops, a_star)
    sol = _finish(ops, u, a_star, "finite", float(np.sum(ops.W * u)))
    res = {
        "psi": ker.residual,
        "solvability": orth,
        "equation": _wnorm(ops.K @ u + b, ops.W),
        "min_u_star": _refined_min(ops, u),
        "int_psi_g": float(np.sum(ops.W * psi * ops.g)),
    }
    return CriticalMassReport(sig.alpha0, a_star, sol, sol.mass, float(ell), sig.grid.L, res, ker.psi, ker.psi_nodes)


def u_star_finiteD(sig: SignalField, ell: float) -> SurfaceField:
    return critical_mass_finiteD(sig, ell).u_star.u


def solve_obstacle_finiteD(alpha: float, sig: SignalField, ell: float, warm=None,
                           report: CriticalMassReport | None = None) -> ObstacleSolution:
    """Nonlocal obstacle problem for fixed ``alpha`` and coupling ``ell``.

    Solves ``min(u, -Lap u + ell g Ntilde u + (1 - g) - alpha g) = 0`` by
    semismooth Newton.  ``xi >= 0`` is not implied by this reformulation;
    it is checked afterwards and a violation marks the solution invalid.
    """
    ops = _operators(sig, ell)
    if alpha <= sig.alpha0:
        return _zero_solution(ops, alpha, "finite")
    if report is not None and abs(alpha - report.alpha_star) <= 1e-12 * max(1.0, report.alpha_star):
        return report.u_star
    if warm is None:
        # the well-mixed solution at the same alpha is a good first active set
        a_inf = alpha_star_Dinf(sig)
        if alpha < a_inf:
            warm = solve_obstacle_Dinf(alpha, sig).u_nodes
    scale = float(np.sum(ops.W * np.ravel(warm))) if warm is not None else 0.0
    return _solve_ncp(ops, alpha, warm, "finite", scale)


def solve_for_mass_finiteD(m: float, sig: SignalField, ell: float,
                           report: CriticalMassReport | None = None) -> ObstacleSolution:
    """Nonlocal obstacle solution with ``int u = m``; see :func:`solve_for_mass_Dinf`."""
    report = report or critical_mass_finiteD(sig, ell)
    return _solve_for_mass(m, sig, ell, report,
                           lambda a, w: solve_obstacle_finiteD(a, sig, ell, w, report), "finite")


@dataclass
class BulkReconstruction:
    v: SurfaceField
    w: SurfaceField
    w_bar: float
    v_nodes: np.ndarray
    w_nodes: np.ndarray
    residuals: dict


def reconstruct_vw_finiteD(sol: ObstacleSolution, p: ModelParams, sig: SignalField) -> BulkReconstruction:
    """Inactive membrane species and cytosol trace for a nonlocal solution.

    With ``u``, ``alpha`` in units where ``a4 = 1`` the physical fields are
    ``a4 u`` and ``a4 alpha``; then ``a6 w = alpha - ell Ntilde u`` on the
    sphere, ``w_bar = alpha/a6`` and ``v = (1 - g)(a6 w + a4 xi)/a5``.
    ``residuals`` holds the node residuals of the four limiting equations,
    the identity ``w = w_bar - Ntilde u / D`` and the ``w_bar`` quadrature.
    """
    ell = sol.ell
    if ell > 0 and not math.isclose(ell, p.ell, rel_tol=1e-12):
        raise ConsistencyError("solution and parameters use different ell")
    ops = _operators(sig, ell)
    grid = sig.grid
    a4, a5, a6 = p.a4, p.a5, p.a6
    u = a4 * sol.u_nodes.ravel()
    alpha = a4 * sol.alpha
    xi = sol.xi_nodes.ravel()
    g = ops.g
    c = sig.c_nodes(grid).ravel()
    Nt_u = ops.ntilde @ u
    w = (alpha - ell * Nt_u) / a6
    w_bar = alpha / a6
    v = (1.0 - g) * (a6 * w + a4 * xi) / a5
    lap_u = ops.lap @ u
    dtn = node_operator(grid, "dtn")
    D = a6 / ell if ell > 0 else math.inf
    res = {
        "obs1": float(np.max(np.abs(lap_u + c * v - a4 * xi))),
        "obs2": float(np.max(np.abs(-c * v + a4 * xi - a5 * v + a6 * w))),
        "obs4": float(np.max(np.abs(D * (dtn @ w) - (a5 * v - a6 * w)))) if ell > 0 else 0.0,
        "w_identity": float(np.max(np.abs(w - (w_bar - Nt_u / D)))) if ell > 0 else 0.0,
        "w_bar": abs(
            float(np.sum(ops.W * (a4 * (1.0 - g) * xi + ell * g * Nt_u)) / (a6 * np.sum(ops.W * g))) - w_bar
        ),
        "min_v": float(v.min()),
        "min_w": float(w.min()),
    }
    shape = grid.shape
    return BulkReconstruction(
        SurfaceField.from_values(grid, v.reshape(shape)), SurfaceField.from_values(grid, w.reshape(shape)),
        w_bar, v.reshape(shape), w.reshape(shape), res,
    )


# -- localisation ------------------------------------------------------------


def _geodesic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Great-circle distances between every row of ``a`` and every row of ``b``."""
    d = np.clip(a @ b.T, -1.0, 1.0)
    return np.arccos(d)


def localization_metrics(sol: ObstacleSolution, sig: SignalField) -> dict:
    """Support radius, multiplier gap and the mean identity of the active set.

    ``support_radius`` is the largest geodesic distance from an active node
    to the maximiser set of ``g``.  ``mean_identity_residual`` compares the
    active-set average of ``1 - g/g_max`` with ``(alpha - alpha0)/(1 + alpha)``
    (for ``ell > 0`` the nonlocal analogue with ``a6 w_bar = alpha``); the
    average uses the active-fraction weights, and the same quantity computed
    with the plain node indicator is reported as ``nodal_identity_residual``.
    Returns ``{'defined': False}`` when the active set is empty.
    """
    grid = sol.grid
    active = sol.active.ravel()
    if not active.any():
        return {"defined": False, "support_radius": None, "alpha_gap": None, "mean_identity_residual": None}
    nodes = grid.nodes.reshape(-1, 3)
    S = sig.argmax_set(grid)
    dist = _geodesic(nodes[active], S).min(axis=1)
    if (~active).sum() == 0:
        radius = math.pi
    else:
        radius = float(dist.max())
    W = grid.weights.ravel()
    g = sig.g_nodes(grid).ravel()
    gmax = sig.g_max
    alpha = sol.alpha
    a0 = sig.alpha0

    def residual(weights):
        meas = float(np.sum(W * weights))
        avg = lambda f: float(np.sum(W * weights * f)) / meas
        if sol.ell == 0:
            return abs(avg(1.0 - g / gmax) - (alpha - a0) / (1.0 + alpha))
        ops = _operators(sig, sol.ell)
        lhs = avg(sol.ell * g * (ops.ntilde @ sol.u_nodes.ravel()))
        rhs = gmax * ((alpha - a0) + (1.0 + alpha) * avg((g - gmax) / gmax))
        return abs(lhs - rhs)

    chi = sol.active_weight.ravel()
    return {
        "defined": True,
        "support_radius": radius,
        "alpha_gap": alpha - a0,
        "mean_identity_residual": residual(chi),
        "nodal_identity_residual": residual(active.astype(float)),
        "active_measure": float(np.sum(W * chi)),
    }


# -- scaling and the eps -> 0 limit ---------------------------------------------


def rescale(sol: ObstacleSolution, a4: float) -> ObstacleSolution:
    """Restore ``a4 != 1``: ``(u, alpha) -> (a4 u, a4 alpha)``; ``xi`` and the
    active set are unchanged."""
    return ObstacleSolution(
        a4 * sol.u_nodes, sol.xi_nodes.copy(), a4 * sol.alpha, sol.regime, sol.ell,
        sol.active.copy(), sol.active_weight.copy(), a4 * sol.kkt_residual, sol.repr_defect,
        sol.grid, sol.converged, sol.valid, sol.iterations, list(sol.notes),
    )


def limit_solution(p: ModelParams, sig: SignalField) -> ObstacleSolution:
    """Obstacle solution matching the mass and regime of ``p`` in physical
    units (``a4`` restored)."""
    m = p.mass / p.a4
    if p.infinite_diffusion:
        sol = solve_for_mass_Dinf(m, sig)
    else:
        sol = solve_for_mass_finiteD(m, sig, p.ell)
    return rescale(sol, p.a4)


def limit_profile(p: ModelParams, sig: SignalField) -> np.ndarray:
    """Node values of the limiting ``U`` profile."""
    return limit_solution(p, sig).u_nodes


def check_converged(sol: ObstacleSolution) -> ObstacleSolution:
    if not sol.converged:
        raise ConvergenceError("; ".join(sol.notes) or "obstacle solver did not converge")
    return sol
