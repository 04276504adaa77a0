"""Real spherical-harmonic fields on the unit sphere.

Coefficients use the real orthonormal basis

    Y_l0  = p_l0(cos t)
    Y_lm  = sqrt(2) p_lm(cos t) cos(m phi)      (m > 0)
    Y_l-m = sqrt(2) p_lm(cos t) sin(m phi)      (m > 0)

with ``p_lm`` the associated Legendre functions normalised so that
``int Y_lm**2 = 1`` over the sphere.  A coefficient vector has length
``(L+1)**2`` and entry ``l*l + l + m`` holds degree ``l``, order ``m``.

Grids are Gauss-Legendre in colatitude times equispaced in longitude.  A
grid built for truncation degree ``L`` may carry more nodes than needed
(``L_grid > L``); this is how the dealiasing and refined grids are formed.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import ConsistencyError, DomainError, FieldFormatError

FOUR_PI = 4.0 * math.pi
SQRT_FOUR_PI = math.sqrt(FOUR_PI)


def n_coeffs(L: int) -> int:
    """Number of real coefficients up to degree ``L``."""
    return (L + 1) ** 2


def lm_index(l: int, m: int) -> int:
    """Position of degree ``l``, order ``m`` in a coefficient vector."""
    if abs(m) > l:
        raise ValueError(f"|m| must not exceed l (got l={l}, m={m})")
    return l * l + l + m


def degree_order(L: int) -> tuple[np.ndarray, np.ndarray]:
    """Degree and order arrays aligned with the coefficient ordering."""
    ls = np.concatenate([np.full(2 * l + 1, l) for l in range(L + 1)])
    ms = np.concatenate([np.arange(-l, l + 1) for l in range(L + 1)])
    return ls, ms


def normalized_legendre(L: int, x: np.ndarray) -> np.ndarray:
    """Orthonormal associated Legendre functions ``p_lm(x)``.

    Returns an array of shape ``(x.size, L+1, L+1)`` indexed ``[k, l, m]``
    with zeros for ``m > l``.  No Condon-Shortley phase is applied.
    """
    x = np.asarray(x, dtype=float).ravel()
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = np.zeros((x.size, L + 1, L + 1))
    P[:, 0, 0] = 1.0 / SQRT_FOUR_PI
    for m in range(1, L + 1):
        P[:, m, m] = math.sqrt((2 * m + 1) / (2 * m)) * s * P[:, m - 1, m - 1]
    for m in range(L):
        P[:, m + 1, m] = math.sqrt(2 * m + 3) * x * P[:, m, m]
    for m in range(L + 1):
        for l in range(m + 2, L + 1):
            a = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            P[:, l, m] = a * (x * P[:, l - 1, m] - b * P[:, l - 2, m])
    return P


def _basis_legendre(L: int, x: np.ndarray) -> np.ndarray:
    """Legendre table including the sqrt(2) factor of the real basis."""
    P = normalized_legendre(L, x)
    P[:, :, 1:] *= math.sqrt(2.0)
    return P


class SphereGrid:
    """Gauss-Legendre x equispaced-longitude grid for degree-``L`` fields.

    Parameters
    ----------
    L : int
        Truncation degree of the coefficient space.
    L_grid : int, optional
        Degree the node count is sized for; defaults to ``L``.  The grid has
        ``nlat = L_grid + 1`` colatitudes and ``nlon = 2 L_grid + 2``
        longitudes, so products up to degree ``2 L_grid`` integrate exactly.

    Notes
    -----
    Instances are treated as immutable.  Use :func:`sphere_grid` to obtain
    shared cached instances.
    """

    def __init__(self, L: int, L_grid: int | None = None):
        if L < 0:
            raise ValueError("L must be nonnegative")
        L_grid = L if L_grid is None else int(L_grid)
        if L_grid < L:
            raise ValueError("L_grid must be at least L")
        self.L = int(L)
        self.L_grid = L_grid
        self.nlat = L_grid + 1
        self.nlon = 2 * L_grid + 2
        xg, wg = np.polynomial.legendre.leggauss(self.nlat)
        order = np.argsort(-xg)
        self.cos_theta = xg[order]
        self.theta = np.arccos(self.cos_theta)
        self.lat_weights = wg[order]
        self.phi = 2.0 * math.pi * np.arange(self.nlon) / self.nlon
        self.weights = np.outer(self.lat_weights, np.full(self.nlon, 2.0 * math.pi / self.nlon))
        st = np.sin(self.theta)[:, None]
        self.nodes = np.stack(
            [
                st * np.cos(self.phi)[None, :],
                st * np.sin(self.phi)[None, :],
                np.broadcast_to(self.cos_theta[:, None], (self.nlat, self.nlon)),
            ],
            axis=-1,
        )
        self.ncoef = n_coeffs(self.L)
        self.degrees, self.orders = degree_order(self.L)
        self._P = _basis_legendre(self.L, self.cos_theta)
        lc, mc = np.nonzero(np.tril(np.ones((L + 1, L + 1), dtype=bool)))
        self._lc, self._mc = lc, mc
        self._cos_idx = lc * lc + lc + mc
        sel = mc > 0
        self._ls, self._ms = lc[sel], mc[sel]
        self._sin_idx = self._ls * self._ls + self._ls - self._ms
        for arr in (self.cos_theta, self.theta, self.lat_weights, self.phi, self.weights, self.nodes, self._P):
            arr.setflags(write=False)
        self._node_matrix = None

    def __repr__(self) -> str:
        return f"SphereGrid(L={self.L}, nlat={self.nlat}, nlon={self.nlon})"

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    @property
    def n_nodes(self) -> int:
        return self.nlat * self.nlon

    # -- transforms -----------------------------------------------------
    def _unpack(self, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        L = self.L
        lead = coeffs.shape[:-1]
        Cc = np.zeros(lead + (L + 1, L + 1))
        Cs = np.zeros(lead + (L + 1, L + 1))
        Cc[..., self._lc, self._mc] = coeffs[..., self._cos_idx]
        Cs[..., self._ls, self._ms] = coeffs[..., self._sin_idx]
        return Cc, Cs

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Grid values of the field(s) with the given coefficients.

        ``coeffs`` may carry leading batch axes; the output has shape
        ``coeffs.shape[:-1] + (nlat, nlon)``.
        """
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-1] != self.ncoef:
            raise FieldFormatError(f"expected {self.ncoef} coefficients, got {coeffs.shape[-1]}")
        L = self.L
        Cc, Cs = self._unpack(coeffs)
        Gc = np.einsum("tlm,...lm->...tm", self._P, Cc)
        Gs = np.einsum("tlm,...lm->...tm", self._P, Cs)
        F = np.zeros(coeffs.shape[:-1] + (self.nlat, self.nlon // 2 + 1), dtype=complex)
        F[..., 0] = Gc[..., 0] * self.nlon
        if L > 0:
            F[..., 1 : L + 1] = (Gc[..., 1:] - 1j * Gs[..., 1:]) * (self.nlon / 2.0)
        return np.fft.irfft(F, n=self.nlon, axis=-1)

    def analyze(self, values: np.ndarray) -> np.ndarray:
        """Quadrature projection of grid values onto degrees ``<= L``.

        Raises
        ------
        DomainError
            If any sample is not finite.
        """
        values = np.asarray(values, dtype=float)
        if values.shape[-2:] != self.shape:
            raise FieldFormatError(f"expected grid shape {self.shape}, got {values.shape[-2:]}")
        if not np.all(np.isfinite(values)):
            bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
            raise DomainError(f"sh_analyze: {bad} non-finite sample(s) in input")
        L = self.L
        F = np.fft.rfft(values, axis=-1)[..., : L + 1] * (2.0 * math.pi / self.nlon)
        wP = self._P * self.lat_weights[:, None, None]
        Cc = np.einsum("tlm,...tm->...lm", wP, F.real)
        Cs = np.einsum("tlm,...tm->...lm", wP, -F.imag)
        out = np.empty(values.shape[:-2] + (self.ncoef,))
        out[..., self._cos_idx] = Cc[..., self._lc, self._mc]
        out[..., self._sin_idx] = Cs[..., self._ls, self._ms]
        return out

    def integrate(self, values: np.ndarray) -> float:
        """Quadrature of grid values over the sphere."""
        return float(np.sum(self.weights * values))

    def evaluate(self, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Point values of a degree-``L`` expansion at arbitrary unit vectors."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        P = _basis_legendre(self.L, np.clip(pts[:, 2], -1.0, 1.0))
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        m = np.arange(self.L + 1)
        cosm = np.cos(np.outer(phi, m))
        sinm = np.sin(np.outer(phi, m))
        Cc, Cs = self._unpack(np.asarray(coeffs, dtype=float))
        return np.einsum("klm,lm,km->k", P, Cc, cosm) + np.einsum("klm,lm,km->k", P, Cs, sinm)

    def node_matrix(self) -> np.ndarray:
        """Dense synthesis matrix of shape ``(n_nodes, ncoef)``."""
        if self._node_matrix is None:
            S = self.synthesize(np.eye(self.ncoef)).reshape(self.ncoef, -1).T.copy()
            S.setflags(write=False)
            self._node_matrix = S
        return self._node_matrix

    def dealias_grid(self) -> "SphereGrid":
        """Grid with ``L_grid = ceil(3L/2)`` for quadratic products."""
        return sphere_grid(self.L, max(self.L_grid, -(-3 * self.L // 2)))

    def refined_grid(self) -> "SphereGrid":
        """Grid with twice the resolution, used for extremum searches."""
        return sphere_grid(self.L, max(2 * self.L, self.L_grid, 4))


@lru_cache(maxsize=64)
def sphere_grid(L: int, L_grid: int | None = None) -> SphereGrid:
    """Cached :class:`SphereGrid` factory (instances are read-only)."""
    return SphereGrid(L, L_grid)


def sh_analyze(grid: SphereGrid, values: np.ndarray) -> np.ndarray:
    """Coefficients of the degree-``L`` projection of grid samples."""
    return grid.analyze(values)


def sh_synthesize(grid: SphereGrid, coeffs: np.ndarray) -> np.ndarray:
    """Grid samples of a coefficient vector."""
    return grid.synthesize(coeffs)


class SurfaceField:
    """Scalar field on the sphere, band-limited to the grid degree.

    The coefficient vector is authoritative.  Grid values are synthesised on
    first access and cached; ``values_current`` reports whether that cache
    is populated.  Fields are immutable.
    """

    __slots__ = ("grid", "_coeffs", "_values")

    def __init__(self, grid: SphereGrid, coeffs: np.ndarray):
        coeffs = np.array(coeffs, dtype=float)
        if coeffs.shape != (grid.ncoef,):
            raise FieldFormatError(f"expected {grid.ncoef} coefficients, got shape {coeffs.shape}")
        coeffs.setflags(write=False)
        self.grid = grid
        self._coeffs = coeffs
        self._values = None

    @classmethod
    def from_values(cls, grid: SphereGrid, values: np.ndarray) -> "SurfaceField":
        return cls(grid, grid.analyze(values))

    @classmethod
    def from_function(cls, grid: SphereGrid, func) -> "SurfaceField":
        """Project ``func(x, y, z)`` sampled on the dealiasing grid."""
        fine = grid.dealias_grid()
        x, y, z = np.moveaxis(fine.nodes, -1, 0)
        return cls(grid, fine.analyze(np.asarray(func(x, y, z), dtype=float) * np.ones(fine.shape)))

    @classmethod
    def constant(cls, grid: SphereGrid, value: float) -> "SurfaceField":
        c = np.zeros(grid.ncoef)
        c[0] = value * SQRT_FOUR_PI
        return cls(grid, c)

    @classmethod
    def basis(cls, grid: SphereGrid, l: int, m: int) -> "SurfaceField":
        c = np.zeros(grid.ncoef)
        c[lm_index(l, m)] = 1.0
        return cls(grid, c)

    @property
    def coeffs(self) -> np.ndarray:
        return self._coeffs

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            v = self.grid.synthesize(self._coeffs)
            v.setflags(write=False)
            self._values = v
        return self._values

    @property
    def values_current(self) -> bool:
        return self._values is not None

    @property
    def L(self) -> int:
        return self.grid.L

    def integral(self) -> float:
        return float(self._coeffs[0] * SQRT_FOUR_PI)

    def mean(self) -> float:
        return float(self._coeffs[0] / SQRT_FOUR_PI)

    def norm(self) -> float:
        """L2 norm over the sphere (Parseval)."""
        return float(np.linalg.norm(self._coeffs))

    def inner(self, other: "SurfaceField") -> float:
        return float(np.dot(self._coeffs, other._coeffs))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self.grid.evaluate(self._coeffs, points)

    def on_grid(self, grid: SphereGrid) -> np.ndarray:
        """Values on another grid of the same truncation degree."""
        if grid.L != self.grid.L:
            raise FieldFormatError("grid degree mismatch")
        return grid.synthesize(self._coeffs)

    def minimum(self) -> tuple[float, np.ndarray]:
        """Minimum over the sphere and its location (refined grid + local fit)."""
        fine = self.grid.refined_grid()
        return sphere_minimum(self.evaluate, fine.synthesize(self._coeffs), fine)

    def maximum(self) -> tuple[float, np.ndarray]:
        fine = self.grid.refined_grid()
        val, x = sphere_minimum(lambda p: -self.evaluate(p), -fine.synthesize(self._coeffs), fine)
        return -val, x

    def with_coeffs(self, coeffs: np.ndarray) -> "SurfaceField":
        return SurfaceField(self.grid, coeffs)

    def _check(self, other: "SurfaceField") -> None:
        if other.grid.L != self.grid.L:
            raise FieldFormatError("fields of different degree")

    def __add__(self, other):
        if isinstance(other, SurfaceField):
            self._check(other)
            return SurfaceField(self.grid, self._coeffs + other._coeffs)
        c = self._coeffs.copy()
        c[0] += float(other) * SQRT_FOUR_PI
        return SurfaceField(self.grid, c)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, SurfaceField):
            self._check(other)
            return SurfaceField(self.grid, self._coeffs - other._coeffs)
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return SurfaceField(self.grid, -self._coeffs)

    def __mul__(self, scalar):
        if isinstance(scalar, SurfaceField):
            raise TypeError("use pointwise_nonlinear for products of fields")
        return SurfaceField(self.grid, self._coeffs * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return SurfaceField(self.grid, self._coeffs / float(scalar))

    def __repr__(self) -> str:
        return f"SurfaceField(L={self.L}, mean={self.mean():.6g})"


# -- spectral operators ----------------------------------------------------

def laplace_beltrami_symbol(L: int) -> np.ndarray:
    ls, _ = degree_order(L)
    return -(ls * (ls + 1.0))


def dtn_symbol(L: int) -> np.ndarray:
    ls, _ = degree_order(L)
    return ls.astype(float)


def ntd_symbol(L: int) -> np.ndarray:
    ls, _ = degree_order(L)
    out = np.zeros(ls.size)
    out[ls > 0] = 1.0 / ls[ls > 0]
    return out


def tilde_dtn_symbol(L: int) -> np.ndarray:
    ls, _ = degree_order(L)
    out = ls + 1.0
    out[0] = 0.0
    return out


def laplace_beltrami(f: SurfaceField) -> SurfaceField:
    """Laplace-Beltrami operator: multiplies degree ``l`` by ``-l(l+1)``."""
    return f.with_coeffs(f.coeffs * laplace_beltrami_symbol(f.L))


def dtn(f: SurfaceField) -> SurfaceField:
    """Dirichlet-to-Neumann map of the unit ball: multiplies degree ``l`` by ``l``."""
    return f.with_coeffs(f.coeffs * dtn_symbol(f.L))


def ntd(f: SurfaceField) -> SurfaceField:
    """Neumann-to-Dirichlet map: ``1/l`` on ``l >= 1``, constants map to zero."""
    return f.with_coeffs(f.coeffs * ntd_symbol(f.L))


def tilde_dtn(f: SurfaceField) -> SurfaceField:
    """``N f + (f - mean f)``: multiplies degree ``l >= 1`` by ``l + 1``."""
    return f.with_coeffs(f.coeffs * tilde_dtn_symbol(f.L))


def ntd_of_laplacian_identity(u: SurfaceField, tol: float = 1e-10) -> SurfaceField:
    """``T(Lap u)`` evaluated two ways; returns ``-N u - (u - mean u)``.

    Raises
    ------
    ConsistencyError
        If the composition ``T(Lap u)`` and the closed form disagree by more
        than ``tol`` relative to ``max(1, |u|)``.
    """
    direct = ntd(laplace_beltrami(u))
    closed = -dtn(u) - (u - u.mean())
    gap = np.max(np.abs(direct.coeffs - closed.coeffs)) if u.grid.ncoef else 0.0
    scale = max(1.0, float(np.max(np.abs(u.coeffs))))
    if gap > tol * scale:
        raise ConsistencyError(f"T(Lap u) identity violated: gap {gap:.3e}")
    return closed


def pointwise_nonlinear(phi, *fields: SurfaceField, name: str = "phi") -> SurfaceField:
    """Evaluate ``phi`` pointwise on the dealiasing grid and project back.

    Parameters
    ----------
    phi : callable
        Map taking one array per input field and returning an array.
    fields : SurfaceField
        Inputs sharing the same degree.
    name : str
        Label used in error messages.

    Raises
    ------
    DomainError
        If ``phi`` divides by zero or produces non-finite values.
    """
    if not fields:
        raise ValueError("pointwise_nonlinear needs at least one field")
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid.L != grid.L:
            raise FieldFormatError("fields of different degree")
    fine = grid.dealias_grid()
    vals = [fine.synthesize(f.coeffs) for f in fields]
    try:
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            out = np.asarray(phi(*vals), dtype=float) * np.ones(fine.shape)
    except FloatingPointError as exc:
        raise DomainError(f"{name}: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{name}: non-finite value on the dealiasing grid")
    return SurfaceField(grid, fine.analyze(out))


# -- extremum search ---------------------------------------------------------

def _tangent_basis(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([1.0, 0.0, 0.0]) if abs(x[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = a - np.dot(a, x) * x
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(x, e1)
    return e1, e2


_STENCIL = np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)], dtype=float)
_DESIGN = np.column_stack(
    [np.ones(9), _STENCIL[:, 0], _STENCIL[:, 1], _STENCIL[:, 0] ** 2, _STENCIL[:, 0] * _STENCIL[:, 1], _STENCIL[:, 1] ** 2]
)


def _polish(func, x0: np.ndarray, f0: float, radius: float, iters: int = 12) -> tuple[float, np.ndarray]:
    best_f, best_x = f0, x0
    x = x0
    for _ in range(iters):
        e1, e2 = _tangent_basis(x)
        pts = x[None, :] + radius * (_STENCIL[:, :1] * e1 + _STENCIL[:, 1:] * e2)
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        vals = func(pts)
        coef = np.linalg.lstsq(_DESIGN, vals, rcond=None)[0]
        g = coef[1:3]
        H = np.array([[2 * coef[3], coef[4]], [coef[4], 2 * coef[5]]])
        k = int(np.argmin(vals))
        step = _STENCIL[k].copy()
        try:
            if np.all(np.linalg.eigvalsh(H) > 0):
                step = -np.linalg.solve(H, g)
                nrm = np.linalg.norm(step)
                if nrm > 1.0:
                    step /= nrm
        except np.linalg.LinAlgError:
            pass
        cand = x + radius * (step[0] * e1 + step[1] * e2)
        cand /= np.linalg.norm(cand)
        fc = float(func(cand[None, :])[0])
        if vals[k] < best_f:
            best_f, best_x = float(vals[k]), pts[k]
        if fc < best_f:
            best_f, best_x = fc, cand
        x = best_x
        radius *= 0.5
    return best_f, best_x


def sphere_minimum(func, grid_values: np.ndarray, grid: SphereGrid) -> tuple[float, np.ndarray]:
    """Minimum of ``func`` over the sphere.

    Starts from the smallest of ``grid_values`` (samples of ``func`` on
    ``grid``) and the two poles, then refines by repeated local quadratic
    fits in tangent coordinates.
    """
    flat = np.asarray(grid_values).ravel()
    k = int(np.argmin(flat))
    nodes = grid.nodes.reshape(-1, 3)
    poles = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    pole_vals = func(poles)
    radius = math.pi / (grid.nlat + 1)
    best = _polish(func, nodes[k], float(flat[k]), radius)
    for fp, xp in zip(pole_vals, poles):
        cand = _polish(func, xp, float(fp), radius)
        if cand[0] < best[0]:
            best = cand
    return best


# -- node-space operators -----------------------------------------------------

_NODE_SYMBOLS = {
    "laplace_beltrami": (laplace_beltrami_symbol, lambda L: -(L + 1.0) * (L + 2.0)),
    "dtn": (dtn_symbol, lambda L: L + 1.0),
    "ntd": (ntd_symbol, lambda L: 1.0 / (L + 1.0)),
    "tilde_dtn": (tilde_dtn_symbol, lambda L: L + 2.0),
}


@lru_cache(maxsize=16)
def _node_operator_cached(L: int, L_grid: int, kind: str) -> np.ndarray:
    grid = sphere_grid(L, L_grid)
    symbol, tail = _NODE_SYMBOLS[kind]
    S = grid.node_matrix()
    A = S.T * grid.weights.ravel()[None, :]
    proj = S @ A
    op = (S * symbol(L)[None, :]) @ A + tail(L) * (np.eye(grid.n_nodes) - proj)
    op.setflags(write=False)
    return op


def node_operator(grid: SphereGrid, kind: str) -> np.ndarray:
    """Dense operator acting on grid-node values.

    On the band-limited subspace the operator applies the spectral symbol of
    ``kind`` exactly.  Components that the degree-``L`` projection does not
    resolve are assigned the symbol value of degree ``L + 1``, which keeps
    the operator self-adjoint in the quadrature inner product, removes the
    spurious null space of a pure projection, and preserves the identities
    ``T Lap = -Ntilde`` and ``N Ntilde = -Lap`` exactly.

    ``kind`` is one of ``laplace_beltrami``, ``dtn``, ``ntd``, ``tilde_dtn``.
    """
    if kind not in _NODE_SYMBOLS:
        raise ValueError(f"unknown node operator {kind!r}")
    return _node_operator_cached(grid.L, grid.L_grid, kind)
