"""Model parameters and the membrane signal.

All rates are per unit time.  ``a7`` does not appear: a rate multiplying
the signal is folded into ``c`` when the signal is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .spectral import FOUR_PI, SphereGrid, SurfaceField, sphere_minimum


@dataclass(frozen=True)
class ModelParams:
    """Rate constants, bulk diffusivity, scaling parameter and total mass.

    ``D = math.inf`` selects the well-mixed cytosol.  ``eps = 1`` gives the
    original variables; smaller values give the rescaled system in which
    ``U = eps u`` and the exchange rates are ``O(1/eps)``.

    The constructor enforces ``a1, a2 >= 0``, ``a3..a6 > 0``, ``D >= 1``,
    ``0 < eps <= 1`` and ``mass > 0``.  :meth:`unchecked` skips these
    checks for degenerate test configurations (for example all rates zero).
    """

    a1: float = 0.0
    a2: float = 0.0
    a3: float = 1.0
    a4: float = 1.0
    a5: float = 1.0
    a6: float = 1.0
    D: float = math.inf
    eps: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        for name in ("a1", "a2", "a3", "a4", "a5", "a6", "eps", "mass"):
            object.__setattr__(self, name, float(getattr(self, name)))
        D = self.D
        if isinstance(D, str):
            if D.strip().lower() not in ("inf", "infinite", "infinity"):
                raise ConfigError(f"D must be a number or 'infinite', got {D!r}")
            D = math.inf
        object.__setattr__(self, "D", float(D))
        if getattr(self, "_skip_checks", False):
            return
        problems = []
        if self.a1 < 0 or self.a2 < 0:
            problems.append("a1 and a2 must be nonnegative")
        for name in ("a3", "a4", "a5", "a6"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if not self.D >= 1:
            problems.append("D must be at least 1 or infinite")
        if not 0 < self.eps <= 1:
            problems.append("eps must lie in (0, 1]")
        if not self.mass > 0:
            problems.append("mass must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def unchecked(cls, **kwargs) -> "ModelParams":
        """Build parameters without the positivity checks."""
        obj = cls.__new__(cls)
        object.__setattr__(obj, "_skip_checks", True)
        cls.__init__(obj, **kwargs)
        return obj

    @property
    def infinite_diffusion(self) -> bool:
        return math.isinf(self.D)

    @property
    def ell(self) -> float:
        """Nonlocal coupling strength ``a6 / D`` (zero for ``D = inf``)."""
        return 0.0 if self.infinite_diffusion else self.a6 / self.D

    def with_(self, **changes) -> "ModelParams":
        if getattr(self, "_skip_checks", False):
            base = {k: getattr(self, k) for k in ("a1", "a2", "a3", "a4", "a5", "a6", "D", "eps", "mass")}
            base.update(changes)
            return ModelParams.unchecked(**base)
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {
            "a1": self.a1, "a2": self.a2, "a3": self.a3, "a4": self.a4,
            "a5": self.a5, "a6": self.a6,
            "D": "infinite" if self.infinite_diffusion else self.D,
            "eps": self.eps, "mass": self.mass,
        }


def _xyz(points):
    p = np.asarray(points, dtype=float)
    return p[..., 0], p[..., 1], p[..., 2]


class SignalField:
    """Membrane signal ``c > 0`` and the derived ratio ``g = c/(c + a5)``.

    The signal is held as an exact callable of the Cartesian position so
    that node values on any grid are samples rather than truncated series;
    ``c`` and ``g`` are also available as band-limited fields.

    Parameters
    ----------
    grid : SphereGrid
        Grid fixing the truncation degree of the band-limited views.
    c_func : callable
        ``c_func(x, y, z)`` returning the signal, broadcasting over arrays.
    a5 : float
        Detachment rate entering ``g``.
    name : str
        Label used in reports.
    """

    def __init__(self, grid: SphereGrid, c_func, a5: float, name: str = "generic"):
        if not a5 > 0:
            raise ConfigError("a5 must be positive")
        self.grid = grid
        self.a5 = float(a5)
        self.name = name
        self._c_func = c_func
        self._node_cache: dict = {}
        self.c = SurfaceField.from_function(grid, c_func)
        self.g = SurfaceField.from_function(grid, self.g_func)
        fine = grid.refined_grid()
        cf = self.c_nodes(fine)
        self.c0, self.c0_point = sphere_minimum(self.c_at, cf, fine)
        if not self.c0 > 0:
            raise ConfigError(f"signal must be positive, min c = {self.c0:.3e}")
        neg_g, self.argmax_point = sphere_minimum(lambda p: -self.g_at(p), -self.g_nodes(fine), fine)
        self.g_max = -neg_g
        self.g_min = self.c0 / (self.c0 + self.a5)

    # -- evaluation ---------------------------------------------------------
    def c_func(self, x, y, z):
        return np.asarray(self._c_func(x, y, z), dtype=float) * np.ones(np.shape(x))

    def g_func(self, x, y, z):
        c = self.c_func(x, y, z)
        return c / (c + self.a5)

    def c_at(self, points):
        return self.c_func(*_xyz(points))

    def g_at(self, points):
        return self.g_func(*_xyz(points))

    def _nodes(self, grid: SphereGrid, which: str):
        key = (grid.L, grid.L_grid, which)
        if key not in self._node_cache:
            x, y, z = np.moveaxis(grid.nodes, -1, 0)
            arr = self.c_func(x, y, z) if which == "c" else self.g_func(x, y, z)
            arr.setflags(write=False)
            self._node_cache[key] = arr
        return self._node_cache[key]

    def c_nodes(self, grid: SphereGrid) -> np.ndarray:
        """Exact signal values at the nodes of ``grid``."""
        return self._nodes(grid, "c")

    def g_nodes(self, grid: SphereGrid) -> np.ndarray:
        return self._nodes(grid, "g")

    # -- derived quantities ---------------------------------------------------
    @property
    def alpha0(self) -> float:
        """``(1 - g_max)/g_max``."""
        return (1.0 - self.g_max) / self.g_max

    def is_constant(self, tol: float = 1e-12) -> bool:
        return self.g_max - self.g_min <= tol * max(1.0, self.g_max)

    def argmax_set(self, grid: SphereGrid, rtol: float = 1e-10) -> np.ndarray:
        """Points approximating ``{g = g_max}``: the located maximiser plus
        every node of ``grid`` within ``rtol * (g_max - g_min)`` of the maximum."""
        nodes = grid.nodes.reshape(-1, 3)
        tol = rtol * (self.g_max - self.g_min)
        close = nodes[self.g_nodes(grid).ravel() >= self.g_max - tol]
        return np.vstack([self.argmax_point[None, :], close])

    def with_grid(self, grid: SphereGrid) -> "SignalField":
        return SignalField(grid, self._c_func, self.a5, self.name)

    def with_a5(self, a5: float) -> "SignalField":
        return SignalField(self.grid, self._c_func, a5, self.name)

    def __repr__(self) -> str:
        return f"SignalField({self.name}, L={self.grid.L}, g in [{self.g_min:.4g}, {self.g_max:.4g}])"

    # -- constructors ---------------------------------------------------------
    @classmethod
    def from_g(cls, grid: SphereGrid, g_func, a5: float = 1.0, name: str = "generic") -> "SignalField":
        """Signal whose ratio ``g`` is the given function (``0 < g < 1``)."""

        def c_func(x, y, z):
            g = np.asarray(g_func(x, y, z), dtype=float)
            if np.any(g <= 0) or np.any(g >= 1):
                raise ConfigError("g must lie strictly between 0 and 1")
            return a5 * g / (1.0 - g)

        return cls(grid, c_func, a5, name)

    @classmethod
    def from_c(cls, grid: SphereGrid, c_func, a5: float = 1.0, a7: float = 1.0, name: str = "generic") -> "SignalField":
        """Signal ``a7 * c_func``; the factor ``a7`` is absorbed into ``c``."""
        if a7 == 1.0:
            return cls(grid, c_func, a5, name)
        return cls(grid, lambda x, y, z: a7 * np.asarray(c_func(x, y, z), dtype=float), a5, name)

    @classmethod
    def from_field(cls, c: SurfaceField, a5: float = 1.0, name: str = "field") -> "SignalField":
        """Signal given by a band-limited field (for example read from disk)."""
        coeffs = c.coeffs.copy()
        grid = c.grid

        def c_func(x, y, z):
            pts = np.stack(np.broadcast_arrays(x, y, z), axis=-1)
            return grid.evaluate(coeffs, pts)

        return cls(grid, c_func, a5, name)


def constant_signal(grid: SphereGrid, kappa: float, a5: float = 1.0) -> SignalField:
    """Spatially constant signal ``c = kappa``."""
    return SignalField(grid, lambda x, y, z: np.full(np.shape(x), float(kappa)), a5, f"constant({kappa:g})")


def constant_g_signal(grid: SphereGrid, g: float, a5: float = 1.0) -> SignalField:
    """Constant signal chosen so that ``g`` equals the given value."""
    return constant_signal(grid, a5 * g / (1.0 - g), a5)


def axisymmetric_signal(grid: SphereGrid, g0: float, g1: float, a5: float = 1.0) -> SignalField:
    """``g = g0 + g1 cos(theta)``; maximal at the north pole when ``g1 > 0``."""
    return SignalField.from_g(grid, lambda x, y, z: g0 + g1 * z, a5, f"axisym({g0:g},{g1:g})")


def polynomial_signal(grid: SphereGrid, coefficients, a5: float = 1.0) -> SignalField:
    """``g = sum_k coefficients[k] * cos(theta)**k``."""
    coefficients = tuple(float(c) for c in coefficients)
    return SignalField.from_g(
        grid, lambda x, y, z: np.polynomial.polynomial.polyval(z, coefficients), a5, f"poly{coefficients}"
    )


def manufactured_u_star(kappa: float):
    """``kappa (1 + z)^2`` and its surface Laplacian as callables."""

    def u(x, y, z):
        return kappa * (1.0 + z) ** 2

    def lap(x, y, z):
        return -2.0 * kappa * (3.0 * z**2 + 2.0 * z - 1.0)

    return u, lap


def manufactured_signal(grid: SphereGrid, kappa: float = 0.05, alpha_star: float = 0.5, a5: float = 1.0) -> SignalField:
    """Signal for which the critical profile is known in closed form.

    ``g = (1 - Lap u*)/(1 + alpha_star)`` with ``u* = kappa (1 + cos theta)^2``.
    Then ``-Lap u* = -(1 - g) + alpha_star g`` and ``min u* = 0`` at the
    south pole, so the critical multiplier is ``alpha_star`` and the
    critical mass is ``16 pi kappa / 3``.
    """
    _, lap = manufactured_u_star(kappa)
    if 8.0 * kappa >= alpha_star:
        raise ConfigError("manufactured signal needs 8 kappa < alpha_star so that 0 < g < 1")
    return SignalField.from_g(
        grid, lambda x, y, z: (1.0 - lap(x, y, z)) / (1.0 + alpha_star), a5, f"manufactured({kappa:g})"
    )


def manufactured_critical_mass(kappa: float) -> float:
    return 16.0 * math.pi * kappa / 3.0


def total_area() -> float:
    return FOUR_PI


def flat_top_signal(grid: SphereGrid, power: int = 16, g_max: float = 0.9, depth: float = 0.8, a5: float = 1.0) -> SignalField:
    """``g = g_max - depth * ((1 - cos theta)/2)**power``.

    Unique maximum at the north pole with a deficit that stays small over a
    wide cap and drops sharply towards the south pole.
    """
    if not (0 < g_max < 1 and 0 <= depth < g_max):
        raise ConfigError("flat_top_signal needs 0 <= depth < g_max < 1")
    return SignalField.from_g(
        grid, lambda x, y, z: g_max - depth * ((1.0 - z) / 2.0) ** power, a5, f"flat_top({power})"
    )
