"""Time integration of the membrane/cytosol reaction-diffusion system.

Unknowns are the rescaled active membrane concentration ``U = eps u``, the
inactive membrane concentration ``v`` and the cytosolic concentration
``w`` (a :class:`~cellpol.bulk.BulkField`, or a scalar when ``D = inf``)::

    dU/dt     = Lap U + R(U, v)
    dv/dt     = Lap v - (R(U, v) + F) / eps
    eps dw/dt = D Lap w            in the ball,   D dw/dr = F on the sphere

with ``R = (eps a1 + eps a2 U/(eps a3 + U) + c) v - a4 U/(eps + U)`` and
``F = a5 v - a6 w``.  ``eps = 1`` is the original model.  The total
``int (U + eps v) + eps int w`` is conserved.

The integrator is a one-step IMEX scheme: linear diffusion and the
membrane/cytosol exchange are Crank-Nicolson (the bulk and ``v`` are
solved together per mode), and the reaction is explicit with a Heun
predictor-corrector, so the scheme is second order in time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bulk import BALL_VOLUME, BulkDiffusion, BulkField, radial_mesh
from .errors import ConvergenceError
from .kernels import mm_reaction
from .model import ModelParams, SignalField
from .spectral import SQRT_FOUR_PI, SurfaceField, laplace_beltrami_symbol, pointwise_nonlinear

TOL_NEG = 1e-8


def reaction_rhs(u: SurfaceField, v: SurfaceField, w_trace, p: ModelParams, sig: SignalField):
    """Reaction terms of the membrane equations in the original scaling.

    Returns ``(f_u, f_v)`` with ``f_u = (a1 + a2 u/(a3+u) + c) v - a4 u/(1+u)``
    and ``f_v = -f_u - a5 v + a6 w``.  Inputs are clipped at zero before the
    Michaelis-Menten terms are evaluated.  ``w_trace`` is a SurfaceField or a
    scalar.
    """
    fine = u.grid.dealias_grid()
    c = sig.c_nodes(fine)

    def phi(uu, vv):
        return mm_reaction(uu, vv, c, 1.0, p.a1, p.a2, p.a3, p.a4)

    f_u = pointwise_nonlinear(phi, u, v, name="michaelis-menten reaction")
    if isinstance(w_trace, SurfaceField):
        w_c = w_trace.coeffs
    else:
        w_c = np.zeros(u.grid.ncoef)
        w_c[0] = float(w_trace) * SQRT_FOUR_PI
    f_v = SurfaceField(u.grid, -f_u.coeffs - p.a5 * v.coeffs + p.a6 * w_c)
    return f_u, f_v


def reaction_coeffs(U: np.ndarray, v: np.ndarray, grid, p: ModelParams, sig: SignalField) -> np.ndarray:
    """Coefficients of ``R(U, v)`` in the eps-scaling (dealiased)."""
    fine = grid.dealias_grid()
    Uv = fine.synthesize(np.stack([U, v]))
    r = mm_reaction(Uv[0], Uv[1], sig.c_nodes(fine), p.eps, p.a1, p.a2, p.a3, p.a4)
    if not np.all(np.isfinite(r)):
        raise ConvergenceError("non-finite reaction term")
    return fine.analyze(r)


@dataclass(frozen=True)
class TrajectoryState:
    """Snapshot of the system.

    ``u`` holds ``U = eps u`` (identical to ``u`` when ``eps = 1``); ``w``
    is a BulkField for finite ``D`` and a float for ``D = inf``.
    """

    t: float
    u: SurfaceField
    v: SurfaceField
    w: object
    mass: float
    lyapunov: float
    audit: float = 0.0

    @property
    def scalar_bulk(self) -> bool:
        return not isinstance(self.w, BulkField)

    def minima(self) -> tuple[float, float, float]:
        wmin = float(self.w) if self.scalar_bulk else self.w.minimum()
        return float(self.u.values.min()), float(self.v.values.min()), wmin


def total_mass(U: SurfaceField, v: SurfaceField, w, eps: float) -> float:
    """``int (U + eps v) + eps int_ball w``."""
    bulk = float(w) * BALL_VOLUME if not isinstance(w, BulkField) else w.integral()
    return U.integral() + eps * v.integral() + eps * bulk


def lyapunov(U: SurfaceField, v: SurfaceField, w, p: ModelParams) -> float:
    """``int_ball (a6/2) w^2 + int_sphere (U^2 + a5 v^2)/2``."""
    if isinstance(w, BulkField):
        wsq = w.l2_norm() ** 2
    else:
        wsq = float(w) ** 2 * BALL_VOLUME
    return 0.5 * p.a6 * wsq + 0.5 * (U.norm() ** 2 + p.a5 * v.norm() ** 2)


def make_state(t, U, v, w, p) -> TrajectoryState:
    return TrajectoryState(float(t), U, v, w, total_mass(U, v, w, p.eps), lyapunov(U, v, w, p))


def homogeneous_initial_state(grid, p: ModelParams, nr: int = 64, split=(0.5, 0.25, 0.25)) -> TrajectoryState:
    """Spatially constant state carrying mass ``p.mass``.

    ``split`` gives the fractions of the mass placed in ``U``, ``eps v`` and
    ``eps w`` respectively.
    """
    fu, fv, fw = split
    s = fu + fv + fw
    m = p.mass / s
    U = SurfaceField.constant(grid, fu * m / (4.0 * math.pi))
    v = SurfaceField.constant(grid, fv * m / (4.0 * math.pi * p.eps))
    wval = fw * m / (BALL_VOLUME * p.eps)
    w = wval if p.infinite_diffusion else BulkField.constant(grid, radial_mesh(nr), wval)
    return make_state(0.0, U, v, w, p)


def _bulk_operator(grid, mesh, p: ModelParams, cache={}) -> BulkDiffusion:
    key = (grid.L, grid.L_grid, mesh.nr, p.D, p.a5, p.a6, p.eps)
    op = cache.get(key)
    if op is None:
        if len(cache) > 16:
            cache.clear()
        op = cache[key] = BulkDiffusion(grid, mesh, p.D, p.a5, p.a6, p.eps)
    return op


def _cn_surface(coeffs, rhs, dt, lam):
    return ((1.0 - 0.5 * dt * lam) * coeffs + dt * rhs) / (1.0 + 0.5 * dt * lam)


def _check_state(U, v, w, tol_neg):
    if min(float(U.values.min()), float(v.values.min())) < -tol_neg:
        return False
    if isinstance(w, BulkField):
        return w.is_nonnegative(tol_neg)
    return float(w) >= -tol_neg


def step_imex(state: TrajectoryState, dt: float, p: ModelParams, sig: SignalField, tol_neg: float = TOL_NEG):
    """One IMEX step for finite ``D``.

    Returns ``(new_state, accepted)``.  A step is rejected when a field drops
    below ``-tol_neg`` on the grid; the caller then retries with a smaller
    ``dt``.  ``new_state.audit`` is the change of total mass over the step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = state.u.grid
    w = state.w
    op = _bulk_operator(grid, w.mesh, p)
    lap = -laplace_beltrami_symbol(grid.L)
    U0, v0, wp0 = state.u.coeffs, state.v.coeffs, w.profiles

    r0 = reaction_coeffs(U0, v0, grid, p, sig)
    U1 = _cn_surface(U0, r0, dt, lap)
    w1, v1, _ = op.coupled_step(wp0, v0, -r0 / p.eps, dt)
    r1 = reaction_coeffs(U1, v1, grid, p, sig)
    rbar = 0.5 * (r0 + r1)
    U2 = _cn_surface(U0, rbar, dt, lap)
    w2, v2, flux = op.coupled_step(wp0, v0, -rbar / p.eps, dt)

    Unew = SurfaceField(grid, U2)
    vnew = SurfaceField(grid, v2)
    last = w2[:, -1]
    wnew = BulkField(grid, w.mesh, w2, op.boundary_values(last, op.flux(v2, last)), flux)
    ok = _check_state(Unew, vnew, wnew, tol_neg)
    new = make_state(state.t + dt, Unew, vnew, wnew, p)
    return TrajectoryState(new.t, Unew, vnew, wnew, new.mass, new.lyapunov, new.mass - state.mass), ok


def _dinf_v_step(v0, w0, Unew00, rbar, dt, p: ModelParams, lam):
    """Crank-Nicolson step of ``v`` with the scalar cytosol eliminated.

    Modes with ``l >= 1`` decouple.  The mean mode is coupled to ``w``
    through the mass identity ``eps |ball| w = m - int(U + eps v)``.
    """
    eps, a5, a6 = p.eps, p.a5, p.a6
    k = lam + a5 / eps
    v1 = ((1.0 - 0.5 * dt * k) * v0 - dt * rbar / eps) / (1.0 + 0.5 * dt * k)
    # mean mode: v00' = -(r00 + a5 v00 - a6 sqrt(4 pi) w)/eps with w affine in v00
    s = SQRT_FOUR_PI
    beta = eps * BALL_VOLUME
    w_const = (p.mass - s * Unew00) / beta
    w_slope = -eps * s / beta
    h = 0.5 * dt / eps
    lhs = 1.0 + h * (a5 - a6 * s * w_slope)
    rhs = v0[0] - h * (a5 * v0[0] - a6 * s * (w0 + w_const)) - dt * rbar[0] / eps
    v1[0] = rhs / lhs
    w1 = w_const + w_slope * v1[0]
    return v1, w1


def step_imex_Dinf(state: TrajectoryState, dt: float, p: ModelParams, sig: SignalField, tol_neg: float = TOL_NEG):
    """One IMEX step with a well-mixed cytosol (``D = inf``).

    The scalar ``w`` is fixed after each stage by the mass identity, so the
    total mass is conserved to round-off.  The step is rejected if the
    identity would make ``w`` negative or a membrane field drops below
    ``-tol_neg``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = state.u.grid
    lap = -laplace_beltrami_symbol(grid.L)
    U0, v0, w0 = state.u.coeffs, state.v.coeffs, float(state.w)

    r0 = reaction_coeffs(U0, v0, grid, p, sig)
    U1 = _cn_surface(U0, r0, dt, lap)
    v1, _ = _dinf_v_step(v0, w0, U1[0], r0, dt, p, lap)
    r1 = reaction_coeffs(U1, v1, grid, p, sig)
    rbar = 0.5 * (r0 + r1)
    U2 = _cn_surface(U0, rbar, dt, lap)
    v2, w2 = _dinf_v_step(v0, w0, U2[0], rbar, dt, p, lap)

    Unew = SurfaceField(grid, U2)
    vnew = SurfaceField(grid, v2)
    ok = _check_state(Unew, vnew, w2, tol_neg)
    new = make_state(state.t + dt, Unew, vnew, w2, p)
    return TrajectoryState(new.t, Unew, vnew, w2, new.mass, new.lyapunov, new.mass - state.mass), ok


def rhs_norm(state: TrajectoryState, p: ModelParams, sig: SignalField) -> float:
    """L2 norm of ``(dU/dt, dv/dt)`` at the given state."""
    grid = state.u.grid
    U, v = state.u.coeffs, state.v.coeffs
    lap = laplace_beltrami_symbol(grid.L)
    r = reaction_coeffs(U, v, grid, p, sig)
    if state.scalar_bulk:
        wc = np.zeros_like(v)
        wc[0] = float(state.w) * SQRT_FOUR_PI
        F = p.a5 * v - p.a6 * wc
    else:
        op = _bulk_operator(grid, state.w.mesh, p)
        F = op.flux(v, state.w.profiles[:, -1])
    fU = lap * U + r
    fv = lap * v - (r + F) / p.eps
    return float(math.sqrt(np.dot(fU, fU) + np.dot(fv, fv)))


@dataclass
class DtPolicy:
    """Step-size controller.

    Steps start at ``dt``.  A rejected step is retried with half the step;
    with ``grow=True`` the step doubles after ``grow_after`` consecutive
    accepted steps, never exceeding ``dt_max`` or the initial ``dt`` times
    ``grow_limit``.
    """

    dt: float = 1e-3
    dt_min: float = 1e-6
    dt_max: float = 1e-1
    grow: bool = False
    grow_after: int = 10
    grow_limit: float = 1.0
    tol_neg: float = TOL_NEG


@dataclass
class Trajectory:
    """Result of :func:`run_to_time`."""

    states: list
    times: np.ndarray
    mass: np.ndarray
    lyapunov: np.ndarray
    min_u: np.ndarray
    min_v: np.ndarray
    min_w: np.ndarray
    rhs_norm: np.ndarray
    n_steps: int = 0
    n_rejected: int = 0
    audits: list = field(default_factory=list)
    steady: bool = False

    @property
    def final(self) -> TrajectoryState:
        return self.states[-1]

    def mass_drift(self) -> float:
        return float(np.max(np.abs(self.mass - self.mass[0])) / abs(self.mass[0]))

    def rows(self):
        cols = (self.times, self.mass, self.lyapunov, self.min_u, self.min_v, self.min_w, self.rhs_norm)
        return [tuple(float(c[i]) for c in cols) for i in range(len(self.times))]

    CSV_HEADER = "t,mass,lyapunov,min_u,min_v,min_w,rhs_norm"


def run_to_time(
    state0: TrajectoryState,
    T: float,
    policy: DtPolicy | None,
    p: ModelParams,
    sig: SignalField,
    sample_every: float | None = None,
    keep_states: bool = False,
    tol_ss: float | None = None,
    ss_count: int = 10,
    check_decay: bool = False,
) -> Trajectory:
    """Advance ``state0`` to time ``T``.

    Diagnostics are recorded at ``t = 0``, every ``sample_every`` time units
    and at ``T``.  With ``tol_ss`` set, the run stops early once the RHS norm
    stays below ``tol_ss`` for ``ss_count`` consecutive samples.  With
    ``check_decay`` set, a warning is raised if the RHS norm does not
    decrease monotonically over the last decade of samples.

    Raises
    ------
    ConvergenceError
        If a step is rejected at the minimum step size.
    """
    policy = policy or DtPolicy()
    step = step_imex_Dinf if p.infinite_diffusion else step_imex
    if sample_every is None:
        sample_every = max(T / 100.0, policy.dt)
    rec = {k: [] for k in ("t", "mass", "lyap", "mu", "mv", "mw", "rhs")}
    states = []

    def record(s):
        mu, mv, mw = s.minima()
        rec["t"].append(s.t)
        rec["mass"].append(s.mass)
        rec["lyap"].append(s.lyapunov)
        rec["mu"].append(mu)
        rec["mv"].append(mv)
        rec["mw"].append(mw)
        rec["rhs"].append(rhs_norm(s, p, sig))
        if keep_states or not states:
            states.append(s)

    state = state0
    record(state)
    dt = policy.dt
    dt_cap = min(policy.dt_max, policy.dt * policy.grow_limit) if policy.grow else policy.dt
    n_steps = n_rej = streak = below = 0
    audits = []
    next_sample = sample_every
    steady = False
    while state.t < T - 1e-12 * max(1.0, T):
        h = min(dt, T - state.t, next_sample - state.t) if next_sample > state.t else min(dt, T - state.t)
        new, ok = step(state, h, p, sig, policy.tol_neg)
        if not ok:
            n_rej += 1
            streak = 0
            dt = h / 2.0
            if dt < policy.dt_min:
                raise ConvergenceError(f"step rejected at dt={h:.3e} (t={state.t:.6g})")
            continue
        state = new
        n_steps += 1
        audits.append(new.audit)
        streak += 1
        if policy.grow and streak >= policy.grow_after and dt < dt_cap:
            dt = min(2.0 * dt, dt_cap)
            streak = 0
        if state.t >= next_sample - 1e-12 * max(1.0, next_sample) or state.t >= T - 1e-12 * max(1.0, T):
            record(state)
            next_sample = state.t + sample_every
            if tol_ss is not None:
                below = below + 1 if rec["rhs"][-1] < tol_ss else 0
                if below >= ss_count:
                    steady = True
                    break
    if not keep_states and states[-1] is not state:
        states.append(state)
    traj = Trajectory(
        states,
        np.array(rec["t"]), np.array(rec["mass"]), np.array(rec["lyap"]),
        np.array(rec["mu"]), np.array(rec["mv"]), np.array(rec["mw"]), np.array(rec["rhs"]),
        n_steps, n_rej, audits, steady,
    )
    if check_decay and len(traj.rhs_norm) >= 3:
        tail = traj.rhs_norm[-max(3, len(traj.rhs_norm) // 10):]
        if np.any(np.diff(tail) > 0):
            warnings.warn("RHS norm is not monotonically decreasing at late times", RuntimeWarning, stacklevel=2)
    return traj
