"""Benchmark problems with analytic data: standing wave, Dirichlet reflection, penetrable obstacle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import sympy as sp

from .assembly import MaterialData
from .mesh import BoundaryKind, Mesh, all_absorbing, all_dirichlet, generate_square

t_, x_, y_ = sp.symbols("t x y", real=True)

OBSTACLE_POLYGON = np.array([[0.0, -0.5], [0.5, 0.5], [0.0, 0.0], [0.0, 0.5], [-0.5, 0.0]])
OBSTACLE_REGION = 1


class ScalarField:
    """Vectorized evaluator of a symbolic expression in (t, x, y).

    Called as ``field(t, points)`` with points of shape (..., 2).
    """

    def __init__(self, expr: sp.Expr):
        self.expr = expr
        self._fn = sp.lambdify((t_, x_, y_), expr, "numpy")

    def __call__(self, t: float, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        X, Y = pts[..., 0], pts[..., 1]
        return np.broadcast_to(np.asarray(self._fn(t, X, Y), dtype=float), X.shape).copy()


class GradientField:
    def __init__(self, expr: sp.Expr):
        self.components = (ScalarField(sp.diff(expr, x_)), ScalarField(sp.diff(expr, y_)))

    def __call__(self, t: float, points: np.ndarray) -> np.ndarray:
        return np.stack([c(t, points) for c in self.components], axis=-1)


class ImpedanceData:
    """Boundary datum g = u_t + grad u . n, called as ``g(t, points, normals)``."""

    def __init__(self, expr: sp.Expr):
        self.du = ScalarField(sp.diff(expr, t_))
        self.grad = GradientField(expr)

    def __call__(self, t: float, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        return self.du(t, points) + np.einsum("...a,...a->...", self.grad(t, points), normals)


@dataclass(frozen=True)
class TravelingWaveParams:
    sigma: float = 0.5
    theta: float = 11.0 * math.pi / 8.0
    t0: float = 4.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta)])


@dataclass(frozen=True)
class ReferenceSpec:
    """Numerical reference: degree p on the same mesh with the time step divided by ``dt_divisor``."""

    p: int = 2
    dt_divisor: int = 3


@dataclass
class Scenario:
    """A self-describing problem: domain, boundary split, coefficients and data.

    ``f(t, x)`` and ``g(t, x, n)`` are vectorized over points. When the exact
    solution is known, ``u``, ``du`` and ``grad_u`` evaluate it; otherwise
    ``reference`` describes how to compute a numerical substitute.
    """

    name: str
    bounds: tuple[float, float]
    bc_rule: Callable[[np.ndarray], BoundaryKind]
    materials: MaterialData
    f: Callable | None
    g: Callable | None
    T: float
    rhos: tuple[float, ...]
    u: Callable | None = None
    du: Callable | None = None
    grad_u: Callable | None = None
    region_rule: Callable[[np.ndarray], np.ndarray] | None = None
    reference: ReferenceSpec | None = None
    params: dict = field(default_factory=dict)
    _u_expr: sp.Expr | None = None
    _f_expr: sp.Expr | None = None
    _g_expr: sp.Expr | None = None  # g as a function of (t, x, y) before the normal is applied

    @property
    def has_exact(self) -> bool:
        return self.du is not None and self.grad_u is not None

    def mesh(self, n: int, pattern: str = "diagonal") -> Mesh:
        """Structured mesh with ``n`` cells per side, regions assigned by element centroid."""
        m = generate_square(self.bounds[0], self.bounds[1], n, pattern, self.bc_rule)
        return self.assign_regions(m)

    def assign_regions(self, mesh: Mesh, force: bool = False) -> Mesh:
        """Tag elements by centroid unless the mesh already carries region attributes."""
        if self.region_rule is None or (mesh.regions.any() and not force):
            return mesh
        centroids = mesh.vertices[mesh.elements].mean(axis=1)
        regions = np.asarray(self.region_rule(centroids), dtype=np.int64)
        return Mesh.from_arrays(mesh.vertices, mesh.elements, regions, self.bc_rule)

    def f_derivative(self, r: int) -> Callable | None:
        """r-th time derivative of f, or None when f vanishes."""
        if self._f_expr is None:
            raise ValueError(f"scenario {self.name!r} has no symbolic f")
        expr = sp.diff(self._f_expr, t_, r)
        return None if expr == 0 else ScalarField(expr)

    def g_derivative(self, r: int) -> Callable | None:
        """r-th time derivative of g, evaluated like ``g``."""
        if self._g_expr is None:
            return None
        return ImpedanceData(sp.diff(self._g_expr, t_, r))


def smoothstep_expr(t: sp.Symbol = t_) -> sp.Expr:
    return sp.Piecewise((0, t <= 0), (10 * t**3 - 15 * t**4 + 6 * t**5, t < 1), (1, True))


def smoothstep_chi(t: float) -> tuple[float, float, float]:
    """chi, chi', chi'' of the C^2 quintic ramp from 0 (t <= 0) to 1 (t >= 1)."""
    if t <= 0:
        return 0.0, 0.0, 0.0
    if t >= 1:
        return 1.0, 0.0, 0.0
    return (
        t**3 * (10 - 15 * t + 6 * t * t),
        30 * t**2 * (1 - t) ** 2,
        60 * t * (1 - t) * (1 - 2 * t),
    )


def _exact_fields(u: sp.Expr) -> dict:
    return {"u": ScalarField(u), "du": ScalarField(sp.diff(u, t_)), "grad_u": GradientField(u)}


@lru_cache(maxsize=None)
def _standing_wave_exprs():
    w = smoothstep_expr() * sp.sin(sp.sqrt(2) * sp.pi * t_)
    u = w * sp.sin(sp.pi * x_) * sp.sin(sp.pi * y_)
    f = (sp.diff(w, t_, 2) + 2 * sp.pi**2 * w) * sp.sin(sp.pi * x_) * sp.sin(sp.pi * y_)
    return u, f


def standing_wave(T: float = 10.0, rhos: tuple[float, ...] = (1.0, 0.5, 0.25)) -> Scenario:
    """u = chi(t) sin(sqrt(2) pi t) sin(pi x) sin(pi y) on the unit square, Dirichlet everywhere."""
    u, f = _standing_wave_exprs()
    return Scenario(
        name="standing_wave",
        bounds=(0.0, 1.0),
        bc_rule=all_dirichlet,
        materials=MaterialData.uniform(),
        f=ScalarField(f),
        g=None,
        T=T,
        rhos=tuple(rhos),
        _u_expr=u,
        _f_expr=f,
        **_exact_fields(u),
    )


def pulse_profile(sigma: float) -> tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]:
    """p_sigma(tau) = tau exp(-(tau/sigma)^2) and its derivative."""

    def p(tau):
        tau = np.asarray(tau, dtype=float)
        return tau * np.exp(-((tau / sigma) ** 2))

    def dp(tau):
        tau = np.asarray(tau, dtype=float)
        return (1.0 - 2.0 * tau**2 / sigma**2) * np.exp(-((tau / sigma) ** 2))

    return p, dp


def _pulse_expr(params: TravelingWaveParams, x, y) -> sp.Expr:
    d = params.direction
    tau = (t_ - sp.Float(params.t0)) - (sp.Float(d[0]) * x + sp.Float(d[1]) * y)
    return tau * sp.exp(-((tau / sp.Float(params.sigma)) ** 2))


@dataclass(frozen=True)
class TravelingPulse:
    """Plane wave v(t, x) = p_sigma((t - t0) - d.x)."""

    params: TravelingWaveParams

    def _arg(self, t, points):
        return (t - self.params.t0) - np.asarray(points, dtype=float) @ self.params.direction

    def __call__(self, t, points):
        return pulse_profile(self.params.sigma)[0](self._arg(t, points))

    def dt(self, t, points):
        return pulse_profile(self.params.sigma)[1](self._arg(t, points))

    def grad(self, t, points):
        return -self.dt(t, points)[..., None] * self.params.direction


def traveling_pulse(params: TravelingWaveParams) -> TravelingPulse:
    return TravelingPulse(params)


def _reflection_rule(mid: np.ndarray) -> BoundaryKind:
    if np.isclose(mid[0], 1.0) or np.isclose(mid[1], 1.0):
        return BoundaryKind.ABSORBING
    return BoundaryKind.DIRICHLET


def reflection(sigma: float = 0.5, T: float = 10.0, rhos: tuple[float, ...] | None = None,
               theta: float = 11.0 * math.pi / 8.0, t0: float = 4.0) -> Scenario:
    """Image sum of a plane pulse in the unit square.

    Dirichlet on {x = 0} and {y = 0}, absorbing with gamma = 1 on {x = 1} and
    {y = 1}, f = 0 and g = u_t + grad u . n.
    """
    params = TravelingWaveParams(sigma, theta, t0)
    u = (_pulse_expr(params, x_, y_) - _pulse_expr(params, -x_, y_)
         - _pulse_expr(params, x_, -y_) + _pulse_expr(params, -x_, -y_))
    return Scenario(
        name="reflection",
        bounds=(0.0, 1.0),
        bc_rule=_reflection_rule,
        materials=MaterialData.uniform(gamma=1.0),
        f=None,
        g=ImpedanceData(u),
        T=T,
        rhos=tuple(rhos) if rhos else (1.0 / T,),
        params={"sigma": sigma, "theta": theta, "t0": t0},
        _u_expr=u,
        _f_expr=sp.Integer(0),
        _g_expr=u,
        **_exact_fields(u),
    )


def point_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd crossing test for points of shape (n, 2)."""
    pts = np.asarray(points, dtype=float)
    x, y = pts[:, 0:1], pts[:, 1:2]
    a = polygon
    b = np.roll(polygon, -1, axis=0)
    ay, by = a[None, :, 1], b[None, :, 1]
    straddle = (ay > y) != (by > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = a[None, :, 0] + (y - ay) * (b[None, :, 0] - a[None, :, 0]) / (by - ay)
    return (np.count_nonzero(straddle & (x < xc), axis=1) % 2) == 1


def obstacle(sigma: float = 1.0, T: float = 10.0, rhos: tuple[float, ...] | None = None,
             theta: float = 11.0 * math.pi / 8.0, t0: float = 4.0) -> Scenario:
    """Plane pulse hitting a penetrable polygon in (-1, 1)^2 with absorbing boundary everywhere.

    Inside the polygon mu = 2 and A = I/2; outside mu = 1 and A = I. No exact
    solution; a p = 2 run with a three times smaller step serves as reference.
    """
    params = TravelingWaveParams(sigma, theta, t0)
    u_inc = _pulse_expr(params, x_, y_)
    materials = MaterialData(
        mu={0: 1.0, OBSTACLE_REGION: 2.0},
        A={0: np.eye(2), OBSTACLE_REGION: 0.5 * np.eye(2)},
        gamma=1.0,
    )
    return Scenario(
        name="obstacle",
        bounds=(-1.0, 1.0),
        bc_rule=all_absorbing,
        materials=materials,
        f=None,
        g=ImpedanceData(u_inc),
        T=T,
        rhos=tuple(rhos) if rhos else (1.0 / T,),
        region_rule=lambda c: np.where(point_in_polygon(c, OBSTACLE_POLYGON), OBSTACLE_REGION, 0),
        reference=ReferenceSpec(),
        params={"sigma": sigma, "theta": theta, "t0": t0},
        _f_expr=sp.Integer(0),
        _g_expr=u_inc,
    )


def zero_data(T: float = 1.0, rhos: tuple[float, ...] = (1.0,)) -> Scenario:
    """Homogeneous problem with the zero solution."""
    u = sp.Integer(0) + 0 * t_
    return Scenario(
        name="zero",
        bounds=(0.0, 1.0),
        bc_rule=all_dirichlet,
        materials=MaterialData.uniform(),
        f=None,
        g=None,
        T=T,
        rhos=tuple(rhos),
        _u_expr=u,
        _f_expr=sp.Integer(0),
        **_exact_fields(u),
    )


SCENARIOS = {
    "standing_wave": standing_wave,
    "reflection": reflection,
    "obstacle": obstacle,
    "zero": zero_data,
}
