"""Damped-in-time accumulation of estimator and error, and the bound evaluators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .assembly import ElementQuadrature, MaterialData, absorbing_faces, edge_lagrange_basis
from .mesh import Mesh, build_patches
from .spaces import LagrangeSpace, lagrange_edge_dofs
from .wavesolver import TimeState


@dataclass(frozen=True)
class EstimatorParams:
    rhos: tuple[float, ...] = (1.0,)
    omega: float = 1.0
    r: int = 0

    def __post_init__(self):
        if not self.rhos or any(not rho > 0 for rho in self.rhos):
            raise ValueError("every rho must be positive")
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if self.r < 0:
            raise ValueError("r must be non-negative")


def damped_trapezoid(times: np.ndarray, values: np.ndarray, rho: float) -> np.ndarray:
    """Running trapezoid integral of values * exp(-2 rho t), zero at the first sample."""
    times = np.asarray(times, dtype=float)
    g = np.asarray(values, dtype=float) * np.exp(-2.0 * rho * times)
    out = np.zeros(len(times))
    if len(times) > 1:
        out[1:] = np.cumsum(0.5 * np.diff(times) * (g[1:] + g[:-1]))
    return out


@dataclass
class EstimatorTrace:
    """Per-step estimator and error samples with running damped integrals per rho.

    ``lam2[rho]`` holds Lambda_rho^2(t_n) and ``cum2[rho]`` holds
    C_rho^2(t_n), the damped integral of the squared instantaneous error.
    """

    rhos: tuple[float, ...]
    times: list[float] = field(default_factory=list)
    eta: list[float] = field(default_factory=list)
    err: dict[float, list[float]] = field(default_factory=dict)
    lam2: dict[float, list[float]] = field(default_factory=dict)
    cum2: dict[float, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for rho in self.rhos:
            self.err.setdefault(rho, [])
            self.lam2.setdefault(rho, [])
            self.cum2.setdefault(rho, [])

    @property
    def has_error(self) -> bool:
        return bool(self.times) and all(len(self.err[rho]) == len(self.times) for rho in self.rhos)

    def _step(self, series: list[float], acc: list[float], value2: float, t: float, rho: float) -> None:
        if not acc:
            acc.append(0.0)
            return
        t0 = self.times[-2]
        prev = series[-2] ** 2 * math.exp(-2.0 * rho * t0)
        acc.append(acc[-1] + 0.5 * (t - t0) * (value2 * math.exp(-2.0 * rho * t) + prev))

    def accumulate(self, t: float, eta: float, errors: Mapping[float, float] | None = None) -> None:
        if self.times and not t > self.times[-1]:
            raise ValueError(f"out-of-order step: t={t!r} after t={self.times[-1]!r}")
        self.times.append(float(t))
        self.eta.append(float(eta))
        for rho in self.rhos:
            self._step(self.eta, self.lam2[rho], float(eta) ** 2, t, rho)
            if errors is not None:
                e = float(errors[rho])
                self.err[rho].append(e)
                self._step(self.err[rho], self.cum2[rho], e * e, t, rho)

    def estimate(self, rho: float) -> float:
        return math.sqrt(self.lam2[rho][-1]) if self.lam2[rho] else 0.0


def accumulate(trace: EstimatorTrace, t: float, eta: float, errors: Mapping[float, float] | None = None) -> EstimatorTrace:
    trace.accumulate(t, eta, errors)
    return trace


def damped_error(trace: EstimatorTrace, rho: float) -> float:
    """|||u - u_h|||_rho from the accumulated error samples."""
    if not trace.has_error:
        raise ValueError("trace holds no error samples")
    return math.sqrt(trace.cum2[rho][-1])


def effectivity(estimate: float, error: float) -> float:
    """Lambda / error; NaN when the error vanishes."""
    return estimate / error if error > 0 else float("nan")


@dataclass(frozen=True)
class ErrorReport:
    rho: float
    estimate: float
    error: float
    effectivity: float
    nr_dofs: int
    h_max: float
    dt: float


def error_report(trace: EstimatorTrace, rho: float, nr_dofs: int, h_max: float, dt: float) -> ErrorReport:
    est = trace.estimate(rho)
    err = damped_error(trace, rho) if trace.has_error else float("nan")
    return ErrorReport(rho, est, err, effectivity(est, err), nr_dofs, h_max, dt)


def eoc(values: Sequence[float], sizes: Sequence[float]) -> np.ndarray:
    """Observed orders log(v_{i-1}/v_i) / log(s_{i-1}/s_i); NaN for the first level."""
    v, s = np.asarray(values, dtype=float), np.asarray(sizes, dtype=float)
    out = np.full(len(v), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[1:] = np.log(v[:-1] / v[1:]) / np.log(s[:-1] / s[1:])
    return out


class ErrorEvaluator:
    """Instantaneous energy error against an exact solution.

    ``du(t, x)`` and ``grad_u(t, x)`` evaluate the exact velocity and gradient
    at points of shape (..., 2).
    """

    def __init__(self, space: LagrangeSpace, materials: MaterialData, du: Callable, grad_u: Callable):
        mesh = space.mesh
        p = space.p
        self.space = space
        self.du, self.grad_u = du, grad_u
        self.quad = ElementQuadrature(space, 2 * p + 4)
        self.mu = materials.element_mu(mesh)
        self.A = materials.element_A(mesh)
        self.faces = absorbing_faces(mesh, 2 * p + 4)
        self.gamma = materials.edge_gamma(mesh)[self.faces.edges]
        phi = edge_lagrange_basis(p, self.faces.param)
        self.face_dofs = np.array(
            [space.element_dofs[k, lagrange_edge_dofs(p, j)] for k, j in zip(self.faces.elements, self.faces.local)],
            dtype=np.int64,
        ).reshape(len(self.faces.edges), p + 1)
        self.face_phi = phi

    def components(self, t: float, v_h: np.ndarray, u_h: np.ndarray) -> tuple[float, float]:
        """(||xi'||^2_mu + ||grad xi||^2_A, ||xi'||^2_{gamma, Gamma_A})."""
        q = self.quad
        ne, nq = q.points.shape[:2]
        dv = (q.value_map @ v_h).reshape(ne, nq) - self.du(t, q.points)
        dg = (q.gradient_map @ u_h).reshape(ne, nq, 2) - self.grad_u(t, q.points)
        vol = float(np.einsum("kq,k,kq->", q.weights, self.mu, dv * dv))
        vol += float(np.einsum("kq,kqa,kab,kqb->", q.weights, dg, self.A, dg))
        bnd = 0.0
        if len(self.faces.edges):
            vb = v_h[self.face_dofs] @ self.face_phi.T - self.du(t, self.faces.points)
            bnd = float(np.einsum("f,fq,fq->", self.gamma, self.faces.weights, vb * vb))
        return vol, bnd

    def __call__(self, t: float, v_h: np.ndarray, u_h: np.ndarray, rhos: Sequence[float]) -> dict[float, float]:
        vol, bnd = self.components(t, v_h, u_h)
        return {rho: math.sqrt(vol + bnd / rho) for rho in rhos}


class ReferenceErrorEvaluator:
    """Instantaneous energy error against a discrete reference on the same mesh.

    The reference may use a different polynomial degree; both are evaluated
    at the same quadrature points.
    """

    def __init__(self, space: LagrangeSpace, reference: LagrangeSpace, materials: MaterialData):
        mesh = space.mesh
        degree = 2 * max(space.p, reference.p) + 4
        self.quad = ElementQuadrature(space, degree)
        self.ref_quad = ElementQuadrature(reference, degree)
        self.mu = materials.element_mu(mesh)
        self.A = materials.element_A(mesh)
        self.faces = absorbing_faces(mesh, degree)
        self.gamma = materials.edge_gamma(mesh)[self.faces.edges]
        self._trace = [self._face_trace(sp_) for sp_ in (space, reference)]

    def _face_trace(self, space: LagrangeSpace):
        p = space.p
        dofs = np.array(
            [space.element_dofs[k, lagrange_edge_dofs(p, j)] for k, j in zip(self.faces.elements, self.faces.local)],
            dtype=np.int64,
        ).reshape(len(self.faces.edges), p + 1)
        return dofs, edge_lagrange_basis(p, self.faces.param)

    def components(self, v_h, u_h, v_ref, u_ref) -> tuple[float, float]:
        q, r = self.quad, self.ref_quad
        ne, nq = q.points.shape[:2]
        dv = (q.value_map @ v_h - r.value_map @ v_ref).reshape(ne, nq)
        dg = (q.gradient_map @ u_h - r.gradient_map @ u_ref).reshape(ne, nq, 2)
        vol = float(np.einsum("kq,k,kq->", q.weights, self.mu, dv * dv))
        vol += float(np.einsum("kq,kqa,kab,kqb->", q.weights, dg, self.A, dg))
        bnd = 0.0
        if len(self.faces.edges):
            (d0, b0), (d1, b1) = self._trace
            vb = v_h[d0] @ b0.T - v_ref[d1] @ b1.T
            bnd = float(np.einsum("f,fq,fq->", self.gamma, self.faces.weights, vb * vb))
        return vol, bnd

    def __call__(self, v_h, u_h, v_ref, u_ref, rhos: Sequence[float]) -> dict[float, float]:
        vol, bnd = self.components(v_h, u_h, v_ref, u_ref)
        return {rho: math.sqrt(vol + bnd / rho) for rho in rhos}


def instantaneous_error(state: TimeState, evaluator: ErrorEvaluator, rhos: Sequence[float]) -> dict[float, float]:
    """E_rho(t_n) with the centered difference as discrete velocity."""
    return evaluator(state.t, state.centered_difference(), state.u_curr, rhos)


@dataclass(frozen=True)
class ApproximationBounds:
    guaranteed: float
    prefactor_guaranteed: float
    convex: float | None = None
    prefactor_convex: float | None = None


def approximation_factor_bound(rho: float, omega: float, C_i: float | None = None, h_max: float | None = None,
                               theta_min: float | None = None) -> ApproximationBounds:
    """Bounds on the approximation factor and the matching reliability prefactors 1 + 4 gamma^2.

    The convex-domain bound is returned when ``h_max`` and ``theta_min`` are
    given; ``C_i`` then defaults to 1.
    """
    g = math.sqrt(1.0 + omega / rho)
    if h_max is None or theta_min is None:
        return ApproximationBounds(g, 1.0 + 4.0 * g * g)
    C_i = 1.0 if C_i is None else C_i
    if min(C_i, h_max, theta_min) <= 0:
        raise ValueError("convex-case inputs must be positive")
    r = h_max / theta_min
    c = 2.0 * C_i * (rho * r + (omega / rho) * (omega * r))
    return ApproximationBounds(g, 1.0 + 4.0 * g * g, c, 1.0 + 4.0 * c * c)


def oscillation(rho: float, r: int, times: Sequence[float], f_norms: Sequence[float],
                g_norms: Sequence[float] | None = None) -> float:
    """osc_{rho,r} from samples of ||f^(r)(t)||_mu and ||g^(r)(t)||_{gamma, Gamma_A}."""
    f2 = np.asarray(f_norms, dtype=float) ** 2
    g2 = np.zeros_like(f2) if g_norms is None else np.asarray(g_norms, dtype=float) ** 2
    If = damped_trapezoid(times, f2, rho)[-1] if len(f2) else 0.0
    Ig = damped_trapezoid(times, g2, rho)[-1] if len(g2) else 0.0
    return math.sqrt(4.0 / rho ** (2 * r) * (If / rho**2 + Ig))


def data_norms(space: LagrangeSpace, materials: MaterialData, f: Callable | None, g: Callable | None,
               times: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """||f(t)||_mu and ||g(t)||_{gamma, Gamma_A} at the given times, by quadrature."""
    mesh = space.mesh
    quad = ElementQuadrature(space, 2 * space.p + 4)
    faces = absorbing_faces(mesh, 2 * space.p + 4)
    mu = materials.element_mu(mesh)
    gamma = materials.edge_gamma(mesh)[faces.edges]
    fn, gn = np.zeros(len(times)), np.zeros(len(times))
    for i, t in enumerate(times):
        if f is not None:
            fv = f(t, quad.points)
            fn[i] = math.sqrt(float(np.einsum("kq,k,kq->", quad.weights, mu, fv * fv)))
        if g is not None and len(faces.edges):
            normals = np.broadcast_to(faces.normals[:, None, :], faces.points.shape)
            gv = g(t, faces.points, normals)
            gn[i] = math.sqrt(float(np.einsum("f,fq,fq->", gamma, faces.weights, gv * gv)))
    return fn, gn


@dataclass(frozen=True)
class ConstantsReport:
    kappa_A: float
    kappa_patch: np.ndarray
    h_over_theta: float


def contrast_and_patch_scales(mesh: Mesh, materials: MaterialData) -> ConstantsReport:
    """Coefficient contrast per patch and max_a h_a / theta_a."""
    a_min = materials.element_a_min(mesh)
    a_max = materials.element_a_max(mesh)
    mu = materials.element_mu(mesh)
    gamma = materials.edge_gamma(mesh)
    kappa = np.ones(mesh.n_vertices)
    ratio = 0.0
    for pt in build_patches(mesh):
        els = pt.elements
        lo = a_min[els].min()
        kappa[pt.vertex] = a_max[els].max() / lo
        theta = math.sqrt(lo / mu[els].max())
        if len(pt.absorbing_edges):
            theta = min(theta, lo / np.nanmax(gamma[pt.absorbing_edges]))
        pts = mesh.vertices[np.unique(mesh.elements[els])]
        h = float(np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)))
        ratio = max(ratio, h / theta)
    return ConstantsReport(float(kappa.max()), kappa, ratio)


def min_wave_speed(mesh: Mesh, materials: MaterialData) -> float:
    """theta_min over the whole domain (global inf and sup, not per element)."""
    lo = float(materials.element_a_min(mesh).min())
    theta = math.sqrt(lo / float(materials.element_mu(mesh).max()))
    gamma = materials.edge_gamma(mesh)
    if np.isfinite(gamma).any():
        theta = min(theta, lo / float(np.nanmax(gamma)))
    return theta
