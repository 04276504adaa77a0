"""Cytosolic field on the unit ball, stored as radial profiles per mode.

Each spherical-harmonic coefficient of the bulk field carries a radial
profile sampled at cell centres ``r_i = (i + 1/2) h`` of a uniform mesh on
``[0, 1]``.  The radial operator is a finite-volume discretisation of
``r^-2 (r^2 w')' - l(l+1) r^-2 w``: fluxes through the face at ``r = 0``
vanish (the face has zero area), which is the regularity condition at the
origin.  The outer face is closed with a ghost node that is eliminated
algebraically, giving a second-order Dirichlet or Robin condition while
keeping every per-mode system tridiagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .kernels import tridiag_solve
from .spectral import SQRT_FOUR_PI, SphereGrid, SurfaceField

BALL_VOLUME = 4.0 * math.pi / 3.0


class RadialMesh:
    """Uniform cell-centred mesh on ``[0, 1]`` with ``nr`` cells."""

    def __init__(self, nr: int):
        if nr < 2:
            raise ValueError("nr must be at least 2")
        self.nr = int(nr)
        self.h = 1.0 / nr
        self.r = (np.arange(nr) + 0.5) * self.h
        self.faces = np.arange(nr + 1) * self.h
        self.volumes = (self.faces[1:] ** 3 - self.faces[:-1] ** 3) / 3.0
        for arr in (self.r, self.faces, self.volumes):
            arr.setflags(write=False)

    def __repr__(self) -> str:
        return f"RadialMesh(nr={self.nr})"


@lru_cache(maxsize=16)
def radial_mesh(nr: int) -> RadialMesh:
    return RadialMesh(nr)


def radial_bands(mesh: RadialMesh, l: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tridiagonal bands of the radial operator without the outer-face flux.

    Row ``i`` approximates the cell integral of the Laplacian of
    ``w(r) Y_lm``; the caller adds the flux through ``r = 1``.
    """
    h = mesh.h
    fin = mesh.faces[:-1] ** 2 / h
    fout = mesh.faces[1:] ** 2 / h
    fout = fout.copy()
    fout[-1] = 0.0
    lower = fin.copy()
    upper = fout.copy()
    diag = -(fin + fout) - l * (l + 1.0) * h
    return lower, diag, upper


def _banded_matvec(lower, diag, upper, x):
    y = diag * x
    y[:, 1:] += lower[:, 1:] * x[:, :-1]
    y[:, :-1] += upper[:, :-1] * x[:, 1:]
    return y


@dataclass(frozen=True)
class BulkField:
    """Bulk field ``w(r, x) = sum_lm w_lm(r) Y_lm(x)`` on the unit ball.

    Attributes
    ----------
    grid : SphereGrid
        Angular grid (fixes the truncation degree).
    mesh : RadialMesh
        Radial mesh.
    profiles : ndarray, shape (ncoef, nr)
        Radial profile of each mode at the cell centres.
    boundary : ndarray, shape (ncoef,)
        Coefficients of the trace at ``r = 1``.
    flux : ndarray or None
        ``D dw/dr`` at ``r = 1`` (per mode) used by the step that produced
        this field, time-averaged over the step.
    """

    grid: SphereGrid
    mesh: RadialMesh
    profiles: np.ndarray
    boundary: np.ndarray
    flux: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        p = np.array(self.profiles, dtype=float)
        b = np.array(self.boundary, dtype=float)
        if p.shape != (self.grid.ncoef, self.mesh.nr) or b.shape != (self.grid.ncoef,):
            raise ValueError("profile or boundary shape does not match grid and mesh")
        p.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "profiles", p)
        object.__setattr__(self, "boundary", b)

    @classmethod
    def constant(cls, grid: SphereGrid, mesh: RadialMesh, value: float) -> "BulkField":
        p = np.zeros((grid.ncoef, mesh.nr))
        p[0] = value * SQRT_FOUR_PI
        b = np.zeros(grid.ncoef)
        b[0] = value * SQRT_FOUR_PI
        return cls(grid, mesh, p, b)

    @property
    def nr(self) -> int:
        return self.mesh.nr

    def trace(self) -> SurfaceField:
        """Boundary values at ``r = 1`` as a surface field."""
        return SurfaceField(self.grid, self.boundary)

    def integral(self) -> float:
        """``int_Omega w``; only the (0,0) mode contributes."""
        return float(SQRT_FOUR_PI * np.dot(self.mesh.volumes, self.profiles[0]))

    def mean(self) -> float:
        return self.integral() / BALL_VOLUME

    def l2_norm(self) -> float:
        return float(math.sqrt(np.sum(self.profiles**2 * self.mesh.volumes[None, :])))

    def deviation_norm(self) -> float:
        """``|| w - mean w ||`` in L2 of the ball."""
        p = self.profiles.copy()
        p[0] -= self.mean() * SQRT_FOUR_PI
        return float(math.sqrt(np.sum(p**2 * self.mesh.volumes[None, :])))

    def gradient_norm(self) -> float:
        """Discrete ``|| grad w ||`` in L2 of the ball (interior faces)."""
        h = self.mesh.h
        d = np.diff(self.profiles, axis=1) / h
        radial = np.sum(d**2 * (self.mesh.faces[1:-1] ** 2 * h)[None, :])
        ls = self.grid.degrees
        angular = np.sum(ls * (ls + 1.0) * np.sum(self.profiles**2, axis=1) * h)
        return float(math.sqrt(radial + angular))

    def node_values(self) -> np.ndarray:
        """Samples at every (radial node, grid node), shape ``(nr, nlat, nlon)``."""
        return self.grid.synthesize(self.profiles.T)

    def minimum(self) -> float:
        return float(min(self.node_values().min(), self.trace().values.min()))

    def lower_bound(self) -> float:
        """Cheap lower bound of :meth:`minimum` from coefficient magnitudes.

        Uses ``|Y_lm| <= sqrt(2 (2l+1)/(4 pi))`` for every real harmonic.
        """
        ls = self.grid.degrees
        amp = np.sqrt(2.0 * (2.0 * ls[1:] + 1.0)) / SQRT_FOUR_PI
        prof = np.concatenate([self.profiles, self.boundary[:, None]], axis=1)
        bound = prof[0] / SQRT_FOUR_PI - amp @ np.abs(prof[1:])
        return float(bound.min())

    def is_nonnegative(self, tol: float) -> bool:
        if self.lower_bound() >= -tol:
            return True
        return self.minimum() >= -tol


def _harmonic_profiles(mesh: RadialMesh, L: int) -> np.ndarray:
    """Discrete regular harmonic profiles with unit trace, one row per degree."""
    h = mesh.h
    lows, diags, ups, rhs = [], [], [], []
    for l in range(L + 1):
        lo, di, up = radial_bands(mesh, l)
        di = di.copy()
        di[-1] -= 2.0 / h
        r = np.zeros(mesh.nr)
        r[-1] = -2.0 / h
        lows.append(lo)
        diags.append(di)
        ups.append(up)
        rhs.append(r)
    return tridiag_solve(np.array(lows), np.array(diags), np.array(ups), np.array(rhs))


@lru_cache(maxsize=32)
def harmonic_profiles(nr: int, L: int) -> np.ndarray:
    out = _harmonic_profiles(radial_mesh(nr), L)
    out.setflags(write=False)
    return out


def harmonic_extend(f: SurfaceField, nr: int = 64) -> BulkField:
    """Discrete harmonic extension of ``f`` into the unit ball.

    Each mode solves the radial Laplace equation (finite volumes, regular
    at the origin) with Dirichlet value ``f_lm`` at ``r = 1``.  The discrete
    profiles approximate ``r**l`` to second order.  The stored ``flux`` is
    the one-sided normal derivative ``(w_ghost - w_last)/h`` at ``r = 1``.
    """
    mesh = radial_mesh(nr)
    prof = harmonic_profiles(nr, f.L)
    ls = f.grid.degrees
    profiles = f.coeffs[:, None] * prof[ls]
    normal = 2.0 * (f.coeffs - profiles[:, -1]) / mesh.h
    return BulkField(f.grid, mesh, profiles, f.coeffs.copy(), normal)


def laplace_ode_residual(w: BulkField) -> np.ndarray:
    """Residual of ``r^2 F'' + 2 r F' - l(l+1) F`` at interior radial nodes.

    Central differences are applied to every mode's profile at nodes
    ``1 .. nr-2``; returns an array of shape ``(ncoef, nr - 2)``.
    """
    h = w.mesh.h
    r = w.mesh.r[1:-1]
    p = w.profiles
    d2 = (p[:, 2:] - 2.0 * p[:, 1:-1] + p[:, :-2]) / h**2
    d1 = (p[:, 2:] - p[:, :-2]) / (2.0 * h)
    ll = (w.grid.degrees * (w.grid.degrees + 1.0))[:, None]
    return r**2 * d2 + 2.0 * r * d1 - ll * p[:, 1:-1]


class BulkDiffusion:
    """Bulk diffusion with the Robin exchange condition on ``r = 1``.

    Implements ``eps dw/dt = D Lap w`` in the ball with
    ``D dw/dr = a5 v - a6 w`` on the sphere, where ``v`` is the inactive
    surface species.  ``eps = 1`` gives the original model.

    The outer face uses the ghost value ``w_N`` with
    ``D (w_N - w_{N-1})/h = a5 v - a6 (w_N + w_{N-1})/2``.  Eliminating it
    gives the flux ``gamma (a5 v - a6 w_{N-1})`` with
    ``gamma = 2D/(2D + a6 h)``; :meth:`flux` is the single place that
    formula is evaluated, so the bulk and the surface integrator exchange
    bit-identical values.
    """

    def __init__(self, grid: SphereGrid, mesh: RadialMesh, D: float, a5: float, a6: float, eps: float = 1.0):
        if not (D > 0 and eps > 0):
            raise ValueError("D and eps must be positive")
        self.grid = grid
        self.mesh = mesh
        self.D = float(D)
        self.a5 = float(a5)
        self.a6 = float(a6)
        self.eps = float(eps)
        self.gamma = 2.0 * self.D / (2.0 * self.D + self.a6 * mesh.h)
        self._bands = {l: radial_bands(mesh, l) for l in range(grid.L + 1)}
        self._cache: dict = {}

    def flux(self, v_coeffs: np.ndarray, w_last: np.ndarray) -> np.ndarray:
        """``D dw/dr`` at ``r = 1`` per mode."""
        return self.gamma * (self.a5 * v_coeffs - self.a6 * w_last)

    def boundary_values(self, w_last: np.ndarray, flux: np.ndarray) -> np.ndarray:
        """Trace at ``r = 1`` from the last cell value and the face flux."""
        return w_last + flux * self.mesh.h / (2.0 * self.D)

    def _bulk_operator(self, with_surface: bool, lam: float = 0.0):
        """Per-degree bands of ``J`` in ``M dz/dt = J z`` (see module notes)."""
        N = self.mesh.nr
        n = N + 1 if with_surface else N
        L = self.grid.L
        lo = np.zeros((L + 1, n))
        di = np.zeros((L + 1, n))
        up = np.zeros((L + 1, n))
        ge = self.gamma / self.eps
        for l in range(L + 1):
            a, b, c = self._bands[l]
            lo[l, :N] = self.D / self.eps * a
            di[l, :N] = self.D / self.eps * b
            up[l, :N] = self.D / self.eps * c
            di[l, N - 1] -= ge * self.a6
            if with_surface:
                up[l, N - 1] = ge * self.a5
                lo[l, N] = ge * self.a6
                di[l, N] = -l * (l + 1.0) * lam - ge * self.a5
        mass = np.ones(n)
        mass[:N] = self.mesh.volumes
        return lo, di, up, mass

    def _cn_system(self, dt: float, with_surface: bool, lam: float):
        key = (dt, with_surface, lam)
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            lo, di, up, mass = self._bulk_operator(with_surface, lam)
            ls = self.grid.degrees
            explicit = (0.5 * dt * lo[ls], mass[None, :] + 0.5 * dt * di[ls], 0.5 * dt * up[ls])
            implicit = (-0.5 * dt * lo[ls], mass[None, :] - 0.5 * dt * di[ls], -0.5 * dt * up[ls])
            self._cache[key] = (explicit, implicit)
        return self._cache[key]

    def heat_step(self, w: BulkField, v: SurfaceField, dt: float) -> BulkField:
        """Crank-Nicolson step of the bulk with a frozen surface trace ``v``."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        (ea, eb, ec), (ia, ib, ic) = self._cn_system(dt, False, 0.0)
        rhs = _banded_matvec(ea, eb, ec, w.profiles)
        rhs[:, -1] += dt * self.gamma / self.eps * self.a5 * v.coeffs
        new = tridiag_solve(ia, ib, ic, rhs)
        flux = self.flux(v.coeffs, 0.5 * (w.profiles[:, -1] + new[:, -1]))
        return BulkField(self.grid, self.mesh, new, self.boundary_values(new[:, -1], self.flux(v.coeffs, new[:, -1])), flux)

    def coupled_step(self, w_profiles: np.ndarray, v_coeffs: np.ndarray, source_v: np.ndarray, dt: float, lam: float = 1.0):
        """Crank-Nicolson step of the bulk together with the surface ``v``.

        Solves ``v' = lam Lap v - F/eps + source_v`` jointly with the bulk,
        where ``F`` is the Robin flux; the unknown ``v`` is appended as the
        last entry of each mode's tridiagonal system.

        Returns
        -------
        w_new : ndarray (ncoef, nr)
        v_new : ndarray (ncoef,)
        flux : ndarray (ncoef,)
            Time-averaged flux used by both the bulk and the surface update.
        """
        (ea, eb, ec), (ia, ib, ic) = self._cn_system(dt, True, lam)
        z = np.concatenate([w_profiles, v_coeffs[:, None]], axis=1)
        rhs = _banded_matvec(ea, eb, ec, z)
        rhs[:, -1] += dt * source_v
        znew = tridiag_solve(ia, ib, ic, rhs)
        w_new, v_new = znew[:, :-1], znew[:, -1]
        flux = self.flux(0.5 * (v_coeffs + v_new), 0.5 * (w_profiles[:, -1] + w_new[:, -1]))
        return w_new, v_new, flux

    def steady_profiles(self) -> np.ndarray:
        """Stationary bulk profile per degree for unit surface value ``v``.

        Row ``l`` solves ``D K_l phi + gamma (a5 - a6 phi_last) e_last = 0``.
        """
        key = "steady"
        if key not in self._cache:
            L = self.grid.L
            N = self.mesh.nr
            lo = np.zeros((L + 1, N))
            di = np.zeros((L + 1, N))
            up = np.zeros((L + 1, N))
            rhs = np.zeros((L + 1, N))
            for l in range(L + 1):
                a, b, c = self._bands[l]
                lo[l], di[l], up[l] = self.D * a, self.D * b, self.D * c
                di[l, -1] -= self.gamma * self.a6
                rhs[l, -1] = -self.gamma * self.a5
            self._cache[key] = tridiag_solve(lo, di, up, rhs)
        return self._cache[key]

    def steady_exchange(self) -> np.ndarray:
        """Stationary flux per unit ``v`` for each mode (zero for ``l = 0``)."""
        prof = self.steady_profiles()
        ls = self.grid.degrees
        k = self.gamma * (self.a5 - self.a6 * prof[:, -1])
        k[0] = 0.0
        return k[ls]

    def steady_field(self, v: SurfaceField) -> BulkField:
        """Stationary bulk field in equilibrium with the surface trace ``v``."""
        prof = self.steady_profiles()
        ls = self.grid.degrees
        profiles = v.coeffs[:, None] * prof[ls]
        last = profiles[:, -1]
        flux = self.flux(v.coeffs, last)
        return BulkField(self.grid, self.mesh, profiles, self.boundary_values(last, flux), flux)

    def residual(self, w: BulkField, v: SurfaceField) -> tuple[np.ndarray, np.ndarray]:
        """Stationary residual ``D K w + F e_last`` per mode and the flux ``F``."""
        ls = self.grid.degrees
        out = np.empty_like(w.profiles)
        for l in range(self.grid.L + 1):
            sel = ls == l
            a, b, c = self._bands[l]
            out[sel] = self.D * _banded_matvec(a[None, :], b[None, :], c[None, :], w.profiles[sel])
        flux = self.flux(v.coeffs, w.profiles[:, -1])
        out[:, -1] += flux
        return out, flux


def radial_heat_step(w: BulkField, v: SurfaceField, dt: float, D: float, a5: float, a6: float, eps: float = 1.0) -> BulkField:
    """One Crank-Nicolson step of the bulk equation with Robin coupling.

    The returned field's ``flux`` holds the time-averaged ``D dw/dr`` at
    ``r = 1``, so ``d/dt int w = int flux`` holds to round-off.
    """
    return BulkDiffusion(w.grid, w.mesh, D, a5, a6, eps).heat_step(w, v, dt)


def with_flux(w: BulkField, flux: np.ndarray | None) -> BulkField:
    return replace(w, flux=flux)
