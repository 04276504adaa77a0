"""Stationary states of the membrane/cytosol system.

Stationary states are obtained as in the construction by time relaxation:
the flow of :mod:`cellpol.dynamics` is run until the RHS is small, then a
damped Newton iteration on the discrete stationary equations drives the
residual to round-off.

For finite ``D`` the stationary bulk is linear in the trace ``v``: mode
``(l, m)`` of ``w`` equals ``v_lm`` times a fixed radial profile, so the
bulk is eliminated and only ``(U, v)`` enter Newton.  The exchange flux of
mode ``(l, m)`` becomes ``kappa_l v_lm`` (zero for ``l = 0``).  For
``D = inf`` the scalar ``w`` is kept as an extra unknown bordered by the
mass equation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.optimize import brentq

from .bulk import BALL_VOLUME, BulkDiffusion, BulkField, radial_mesh
from .dynamics import DtPolicy, make_state, run_to_time
from .errors import ConvergenceError
from .kernels import mm_reaction, mm_reaction_partials
from .model import ModelParams, SignalField
from .spectral import (
    FOUR_PI,
    SQRT_FOUR_PI,
    SurfaceField,
    laplace_beltrami,
    laplace_beltrami_symbol,
    pointwise_nonlinear,
)

TOL_SS = 1e-9
TOL_NEWTON = 1e-11


@dataclass
class SteadyState:
    """A stationary state with its diagnostics.

    ``u`` holds ``U = eps u``.  ``w`` is a BulkField (finite ``D``) or a
    float (``D = inf``).  ``residuals`` maps equation names to L2 residual
    norms from the independent evaluator.
    """

    u: SurfaceField
    v: SurfaceField
    w: object
    p: ModelParams
    residuals: dict
    mass_check: float
    converged: bool
    newton_iterations: int = 0
    newton_history: list = field(default_factory=list)

    @property
    def scalar_bulk(self) -> bool:
        return not isinstance(self.w, BulkField)

    def w_mean(self) -> float:
        return float(self.w) if self.scalar_bulk else self.w.mean()

    def w_deviation(self) -> float:
        """``|| w - mean w ||`` over the ball (zero for ``D = inf``)."""
        return 0.0 if self.scalar_bulk else self.w.deviation_norm()

    def xi_proxy(self) -> SurfaceField:
        """``U/(eps + U)``, evaluated with ``U`` clipped at zero."""
        eps = self.p.eps
        return pointwise_nonlinear(lambda U: np.maximum(U, 0) / (eps + np.maximum(U, 0)), self.u, name="xi proxy")

    def norms(self) -> dict:
        """``||U||_H2``, ``||v||_L2`` and ``||w||_H1`` (sum reported as ``total``)."""
        lam = -laplace_beltrami_symbol(self.u.L)
        h2 = float(np.sqrt(np.sum((1.0 + lam) ** 2 * self.u.coeffs**2)))
        l2v = self.v.norm()
        if self.scalar_bulk:
            h1w = abs(float(self.w)) * math.sqrt(BALL_VOLUME)
        else:
            h1w = math.sqrt(self.w.l2_norm() ** 2 + self.w.gradient_norm() ** 2)
        return {"U_H2": h2, "v_L2": l2v, "w_H1": h1w, "total": h2 + l2v + h1w}

    def summary(self) -> dict:
        out = {
            "params": self.p.as_dict(),
            "converged": bool(self.converged),
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "mass_check": float(self.mass_check),
            "newton_iterations": int(self.newton_iterations),
            "int_U": self.u.integral(),
            "int_v": self.v.integral(),
            "w_mean": self.w_mean(),
            "w_deviation": self.w_deviation(),
            "min_U": float(self.u.values.min()),
            "min_v": float(self.v.values.min()),
        }
        out.update(self.norms())
        return out


def homogeneous_state(p: ModelParams, c: float) -> tuple[float, float, float]:
    """Spatially constant stationary state for a constant signal ``c``.

    Returns ``(U, v, w)`` solving ``R(U, v) = 0``, ``a5 v = a6 w`` and the
    mass identity ``4 pi (U + eps v) + eps |ball| w = m``.
    """
    eps = p.eps

    def v_of(U):
        rate = eps * p.a1 + eps * p.a2 * U / (eps * p.a3 + U) + c
        return p.a4 * U / (eps + U) / rate

    def mass_gap(U):
        v = v_of(U)
        return FOUR_PI * (U + eps * v) + eps * BALL_VOLUME * p.a5 * v / p.a6 - p.mass

    U = brentq(mass_gap, 0.0, p.mass / FOUR_PI, xtol=1e-15, rtol=1e-15, maxiter=200)
    v = v_of(U)
    return U, v, p.a5 * v / p.a6


class _System:
    """Discrete stationary equations in coefficient space."""

    def __init__(self, grid, p: ModelParams, sig: SignalField, nr: int):
        self.grid = grid
        self.p = p
        self.sig = sig
        self.n = grid.ncoef
        self.lam = -laplace_beltrami_symbol(grid.L)
        self.fine = grid.dealias_grid()
        self.S = self.fine.node_matrix()
        self.A = self.S.T * self.fine.weights.ravel()[None, :]
        self.c = sig.c_nodes(self.fine).ravel()
        self.dinf = p.infinite_diffusion
        if not self.dinf:
            self.bulk = BulkDiffusion(grid, radial_mesh(nr), p.D, p.a5, p.a6, p.eps)
            self.kappa = self.bulk.steady_exchange()
            prof0 = self.bulk.steady_profiles()[0]
            # bulk integral per unit v00: sqrt(4 pi) sum_i V_i phi_0,i
            self.bulk_mass_factor = float(np.dot(self.bulk.mesh.volumes, prof0))
        self.size = 2 * self.n + (1 if self.dinf else 0)

    def split(self, z):
        n = self.n
        return z[:n], z[n : 2 * n], (z[2 * n] if self.dinf else None)

    def reaction(self, U, v, partials=False):
        p = self.p
        Uv = self.S @ np.stack([U, v], axis=1)
        if partials:
            f, fu, fv = mm_reaction_partials(Uv[:, 0], Uv[:, 1], self.c, p.eps, p.a1, p.a2, p.a3, p.a4)
            return self.A @ f, fu, fv
        return self.A @ mm_reaction(Uv[:, 0], Uv[:, 1], self.c, p.eps, p.a1, p.a2, p.a3, p.a4)

    def mass(self, U, v, w):
        p = self.p
        if self.dinf:
            return SQRT_FOUR_PI * (U[0] + p.eps * v[0]) + p.eps * BALL_VOLUME * w
        return SQRT_FOUR_PI * (U[0] + p.eps * v[0] + p.eps * self.bulk_mass_factor * v[0])

    def residual(self, z):
        p = self.p
        U, v, w = self.split(z)
        R = self.reaction(U, v)
        EU = -self.lam * U + R
        if self.dinf:
            F = p.a5 * v
            F = F.copy()
            F[0] -= p.a6 * SQRT_FOUR_PI * w
            Ev = -p.eps * self.lam * v - R - F
            return np.concatenate([EU, Ev, [self.mass(U, v, w) - p.mass]])
        Ev = -p.eps * self.lam * v - R - self.kappa * v
        Ev[0] = self.mass(U, v, w) - p.mass
        return np.concatenate([EU, Ev])

    def jacobian(self, z):
        p = self.p
        n = self.n
        U, v, w = self.split(z)
        _, fu, fv = self.reaction(U, v, partials=True)
        RU = self.A @ (fu[:, None] * self.S)
        Rv = self.A @ (fv[:, None] * self.S)
        J = np.zeros((self.size, self.size))
        J[:n, :n] = RU - np.diag(self.lam)
        J[:n, n : 2 * n] = Rv
        J[n : 2 * n, :n] = -RU
        if self.dinf:
            J[n : 2 * n, n : 2 * n] = -Rv - np.diag(p.eps * self.lam + p.a5)
            J[n, 2 * n] = p.a6 * SQRT_FOUR_PI
            J[2 * n, 0] = SQRT_FOUR_PI
            J[2 * n, n] = SQRT_FOUR_PI * p.eps
            J[2 * n, 2 * n] = p.eps * BALL_VOLUME
        else:
            J[n : 2 * n, n : 2 * n] = -Rv - np.diag(p.eps * self.lam + self.kappa)
            J[n, :] = 0.0
            J[n, 0] = SQRT_FOUR_PI
            J[n, n] = SQRT_FOUR_PI * p.eps * (1.0 + self.bulk_mass_factor)
        return J

    def pack(self, U, v, w):
        parts = [U.coeffs, v.coeffs]
        if self.dinf:
            parts.append([float(w)])
        return np.concatenate(parts)

    def bulk_field(self, v_coeffs):
        if self.dinf:
            return None
        return self.bulk.steady_field(SurfaceField(self.grid, v_coeffs))


def newton(system: _System, z0: np.ndarray, tol: float = TOL_NEWTON, max_iter: int = 50):
    """Damped Newton iteration with backtracking on the residual norm.

    Returns ``(z, converged, history)`` where ``history`` lists the
    residual norms.
    """
    z = np.array(z0, dtype=float)
    E = system.residual(z)
    r = float(np.linalg.norm(E))
    hist = [r]
    stall = 0
    for _ in range(max_iter):
        if r < tol:
            return z, True, hist
        J = system.jacobian(z)
        try:
            dz = sla.solve(J, -E, check_finite=True)
        except (sla.LinAlgError, ValueError):
            dz = np.linalg.lstsq(J, -E, rcond=None)[0]
        step = 1.0
        while step > 1e-6:
            zt = z + step * dz
            Et = system.residual(zt)
            rt = float(np.linalg.norm(Et))
            if np.isfinite(rt) and rt < (1.0 - 1e-4 * step) * r:
                break
            step *= 0.5
        else:
            # no decrease possible: round-off floor or stagnation
            stall += 1
            if stall > 2:
                break
            zt, Et, rt = z + dz, system.residual(z + dz), float(np.linalg.norm(system.residual(z + dz)))
            if not rt < 10 * r:
                break
        z, E, r = zt, Et, rt
        hist.append(r)
    return z, r < tol, hist


def _relax(state, p, sig, T, tol, dt):
    traj = run_to_time(state, T, DtPolicy(dt=dt, grow=True, grow_limit=20.0), p, sig,
                       sample_every=max(T / 50.0, dt), tol_ss=tol, ss_count=3)
    return traj.final


def solve_steady(
    p: ModelParams,
    sig: SignalField,
    init=None,
    nr: int = 64,
    relax_T: float = 20.0,
    relax_tol: float = 1e-3,
    relax_dt: float = 1e-3,
    tol: float = TOL_NEWTON,
    max_rounds: int = 4,
) -> SteadyState:
    """Stationary state of mass ``p.mass``.

    Parameters
    ----------
    init : TrajectoryState, SteadyState or None
        Starting point.  ``None`` starts from the homogeneous state carrying
        the mass.  A SteadyState (for example from a continuation step) is
        used as the Newton initial guess directly.
    relax_T : float
        Time horizon of each relaxation round before Newton.

    Returns
    -------
    SteadyState
        ``converged`` is false if Newton did not reach ``tol`` within the
        rounds allowed; the best iterate is returned.
    """
    from .dynamics import homogeneous_initial_state

    grid = sig.grid
    system = _System(grid, p, sig, nr)
    if isinstance(init, SteadyState):
        U, v, w = init.u, init.v, init.w
        if p.infinite_diffusion and isinstance(w, BulkField):
            w = w.mean()
        z = system.pack(U, v, w)
        state = None
    else:
        state = init if init is not None else homogeneous_initial_state(grid, p, nr)
        z = None
    best = None
    rounds_used = 0
    for rnd in range(max_rounds):
        rounds_used = rnd + 1
        if z is None:
            state = _relax(state, p, sig, relax_T, relax_tol, relax_dt)
            w0 = state.w if state.scalar_bulk else state.w.mean()
            z = system.pack(state.u, state.v, w0)
        zn, ok, hist = newton(system, z, tol)
        if best is None or hist[-1] < best[2][-1]:
            best = (zn, ok, hist)
        if ok:
            break
        if state is None:
            state = make_state(0.0, SurfaceField(grid, z[: grid.ncoef]), SurfaceField(grid, z[grid.ncoef : 2 * grid.ncoef]),
                               float(z[-1]) if p.infinite_diffusion else system.bulk_field(z[grid.ncoef : 2 * grid.ncoef]), p)
        z = None
    zn, ok, hist = best
    U, v, w = system.split(zn)
    Uf, vf = SurfaceField(grid, U), SurfaceField(grid, v)
    wf = float(w) if p.infinite_diffusion else system.bulk_field(v)
    res = verify_steady(Uf, vf, wf, p, sig)
    tot = total_mass_of(Uf, vf, wf, p.eps)
    return SteadyState(Uf, vf, wf, p, res, abs(tot - p.mass) / p.mass, ok and max(res.values()) < 10 * TOL_SS,
                       len(hist) - 1, hist)


def total_mass_of(U, v, w, eps):
    bulk = w.integral() if isinstance(w, BulkField) else float(w) * BALL_VOLUME
    return U.integral() + eps * v.integral() + eps * bulk


def _bulk_profiles_dense(w_trace_v: SurfaceField, mesh, D, a5, a6, h):
    """Stationary bulk by a dense solve of the ghost-node system per mode.

    Separate from the tridiagonal elimination in ``BulkDiffusion``: the
    ghost value ``w_N`` is kept as an unknown with its own Robin row.
    """
    grid = w_trace_v.grid
    N = mesh.nr
    out = np.zeros((grid.ncoef, N + 1))
    fin = mesh.faces[:-1] ** 2 / h
    fout = mesh.faces[1:] ** 2 / h
    for l in range(grid.L + 1):
        M = np.zeros((N + 1, N + 1))
        for i in range(N):
            M[i, i] = -(fin[i] + fout[i]) - l * (l + 1.0) * h
            if i > 0:
                M[i, i - 1] = fin[i]
            M[i, i + 1] = fout[i]
        # Robin row: D (w_N - w_{N-1})/h + a6 (w_N + w_{N-1})/2 = a5 v
        M[N, N - 1] = -D / h + 0.5 * a6
        M[N, N] = D / h + 0.5 * a6
        sel = np.flatnonzero(grid.degrees == l)
        rhs = np.zeros((N + 1, sel.size))
        rhs[N] = a5 * w_trace_v.coeffs[sel]
        out[sel] = np.linalg.solve(M, rhs).T
    return out


def verify_steady(U: SurfaceField, v: SurfaceField, w, p: ModelParams, sig: SignalField) -> dict:
    """Residuals of the stationary equations from field-level operations.

    Uses :func:`~cellpol.spectral.pointwise_nonlinear` and
    :func:`~cellpol.spectral.laplace_beltrami` for the membrane equations
    and, for finite ``D``, rebuilds the bulk by a dense ghost-node solve and
    compares it with ``w``.  None of the Newton assembly is reused.
    """
    grid = U.grid
    fine = grid.dealias_grid()
    c = sig.c_nodes(fine)
    eps = p.eps

    def react(Uv, vv):
        Uc = np.maximum(Uv, 0.0)
        vc = np.maximum(vv, 0.0)
        return (eps * p.a1 + eps * p.a2 * Uc / (eps * p.a3 + Uc) + c) * vc - p.a4 * Uc / (eps + Uc)

    R = pointwise_nonlinear(react, U, v, name="reaction")
    out = {}
    if isinstance(w, BulkField):
        mesh = w.mesh
        h = mesh.h
        full = _bulk_profiles_dense(v, mesh, p.D, p.a5, p.a6, h)
        trace = 0.5 * (full[:, -1] + full[:, -2])
        flux = p.a5 * v.coeffs - p.a6 * trace
        out["bulk"] = float(np.linalg.norm(full[:, :-1] - w.profiles) + np.linalg.norm(trace - w.boundary))
        F = SurfaceField(grid, flux)
        bulk_int = SQRT_FOUR_PI * float(np.dot(mesh.volumes, full[0, :-1]))
    else:
        F = p.a5 * v - SurfaceField.constant(grid, p.a6 * float(w))
        bulk_int = float(w) * BALL_VOLUME
    EU = laplace_beltrami(U) + R
    Ev = eps * laplace_beltrami(v) - R - F
    out["U"] = EU.norm()
    out["v"] = Ev.norm()
    out["mass"] = abs(U.integral() + eps * v.integral() + eps * bulk_int - p.mass) / p.mass
    return out


def continuation_eps(p: ModelParams, sig: SignalField, eps_list, nr: int = 64, obstacle: bool = True, **kw):
    """Stationary states along a decreasing sequence of ``eps``.

    Each solve is warm-started from the previous one.  When ``obstacle`` is
    set, the L1 distance of ``U_eps`` to the obstacle solution with the same
    mass and regime is reported.

    Returns
    -------
    list of dict
        One record per ``eps`` with keys ``eps``, ``state``, ``l1_error``,
        ``xi_range`` and ``converged``.
    """
    eps_list = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_list) or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be positive and strictly decreasing")
    ref = None
    if obstacle:
        from .obstacle import limit_profile

        ref = limit_profile(p, sig)
    out = []
    prev = None
    for e in eps_list:
        pe = p.with_(eps=e)
        init = prev
        if prev is not None:
            # rescale the warm start to the new eps so that the mass matches
            init = _rescale_warm_start(prev, pe)
        st = solve_steady(pe, sig, init=init, nr=nr, **kw)
        rec = {"eps": e, "state": st, "converged": st.converged}
        xi = st.xi_proxy().values
        rec["xi_range"] = (float(xi.min()), float(xi.max()))
        if ref is not None:
            grid = sig.grid
            rec["l1_error"] = float(np.sum(grid.weights * np.abs(st.u.values - ref)))
        out.append(rec)
        prev = st
    return out


def _rescale_warm_start(prev: SteadyState, p: ModelParams) -> SteadyState:
    """Previous state with ``U`` shifted so the mass identity holds at the new eps."""
    w = prev.w
    bulk = w.integral() if isinstance(w, BulkField) else float(w) * BALL_VOLUME
    if p.infinite_diffusion and isinstance(w, BulkField):
        w = w.mean()
    excess = prev.u.integral() + p.eps * (prev.v.integral() + bulk) - p.mass
    U = prev.u - SurfaceField.constant(prev.u.grid, excess / FOUR_PI)
    return SteadyState(U, prev.v, w, p, {}, 0.0, False)


def continuation_D(p: ModelParams, sig: SignalField, D_list, nr: int = 64, reference: bool = True, **kw):
    """Stationary states along an increasing sequence of ``D``.

    Returns a list of records with ``D``, ``state``, ``w_deviation``
    (``|| w - mean w ||`` over the ball), ``scaled_gradient``
    (``sqrt(D) || grad w ||``) and, with ``reference`` set, ``distance``:
    the L2 distance of ``(U, v)`` to the ``D = inf`` stationary state.
    """
    D_list = [float(d) for d in D_list]
    if any(b <= a for a, b in zip(D_list, D_list[1:])):
        raise ValueError("D_list must be strictly increasing")
    ref = solve_steady(p.with_(D=math.inf), sig, nr=nr, **kw) if reference else None
    out = []
    prev = None
    for D in D_list:
        pD = p.with_(D=D)
        st = solve_steady(pD, sig, init=prev, nr=nr, **kw)
        rec = {
            "D": D,
            "state": st,
            "converged": st.converged,
            "w_deviation": st.w_deviation(),
            "scaled_gradient": math.sqrt(D) * st.w.gradient_norm(),
        }
        if ref is not None:
            rec["distance"] = math.sqrt((st.u - ref.u).norm() ** 2 + (st.v - ref.v).norm() ** 2)
        out.append(rec)
        prev = st
    return out
