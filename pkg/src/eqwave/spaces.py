"""Reference-element machinery: quadrature, Lagrange and Raviart-Thomas bases, dof maps."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from numpy.polynomial import legendre
from scipy.special import roots_jacobi

from .mesh import LOCAL_EDGES, BoundaryKind, Mesh

MAX_QUADRATURE_DEGREE = 12

# reference triangle vertices (0,0), (1,0), (0,1); rows follow LOCAL_EDGES
REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REF_EDGE_NORMALS = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]) / np.array([[np.sqrt(2.0)], [1.0], [1.0]])
REF_EDGE_LENGTHS = np.array([np.sqrt(2.0), 1.0, 1.0])


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (n, 2) reference coordinates
    weights: np.ndarray  # sum to 1/2
    degree: int


@dataclass(frozen=True)
class EdgeRule:
    points: np.ndarray  # (n,) on [0, 1]
    weights: np.ndarray  # sum to 1
    degree: int


@lru_cache(maxsize=None)
def quadrature(degree: int) -> QuadratureRule:
    """Collapsed Gauss rule on the reference triangle, exact up to ``degree``.

    The Duffy map x = s (1 - t), y = t turns the triangle into the unit
    square with weight (1 - t); Gauss-Jacobi(1, 0) in t and Gauss-Legendre
    in s give positive weights and interior points.
    """
    if not 1 <= degree <= MAX_QUADRATURE_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree}")
    n = (degree + 2) // 2
    gs, gw = legendre.leggauss(n)
    s, ws = 0.5 * (gs + 1.0), 0.5 * gw
    jt, jw = roots_jacobi(n, 1.0, 0.0)
    t, wt = 0.5 * (jt + 1.0), jw / 4.0
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    pts = np.column_stack([(S * (1.0 - T)).ravel(), T.ravel()])
    rule = QuadratureRule(pts, W.ravel(), degree)
    rule.points.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


@lru_cache(maxsize=None)
def edge_quadrature(degree: int) -> EdgeRule:
    if degree < 0:
        raise ValueError(f"unsupported edge quadrature degree {degree}")
    n = degree // 2 + 1
    x, w = legendre.leggauss(n)
    return EdgeRule(0.5 * (x + 1.0), 0.5 * w, degree)


def edge_points(k: int, s: np.ndarray) -> np.ndarray:
    """Reference coordinates of parameter ``s`` along local edge ``k`` (lower to higher local vertex)."""
    a, b = REF_VERTICES[LOCAL_EDGES[k]]
    return a[None, :] + np.asarray(s)[:, None] * (b - a)[None, :]


def legendre01(j: int, s: np.ndarray) -> np.ndarray:
    c = np.zeros(j + 1)
    c[j] = 1.0
    return legendre.legval(2.0 * np.asarray(s) - 1.0, c)


def barycentric(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.column_stack([1.0 - x[:, 0] - x[:, 1], x[:, 0], x[:, 1]])


# --- Lagrange ---------------------------------------------------------------

def lagrange_eval(p: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nodal Lagrange basis on the reference triangle.

    Returns values ``(n, nloc)`` and reference gradients ``(n, nloc, 2)``.
    For p = 2 the first three functions belong to the vertices and the next
    three to the midpoints of the local edges (edge k opposite vertex k).
    """
    lam = barycentric(x)
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    n = len(lam)
    if p == 1:
        return lam, np.broadcast_to(dlam, (n, 3, 2)).copy()
    if p != 2:
        raise ValueError(f"unsupported Lagrange degree {p}")
    vals = np.empty((n, 6))
    grads = np.empty((n, 6, 2))
    for i in range(3):
        vals[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
        grads[:, i] = (4.0 * lam[:, i] - 1.0)[:, None] * dlam[i]
    for k, (i, j) in enumerate(LOCAL_EDGES):
        vals[:, 3 + k] = 4.0 * lam[:, i] * lam[:, j]
        grads[:, 3 + k] = 4.0 * (lam[:, i, None] * dlam[j] + lam[:, j, None] * dlam[i])
    return vals, grads


def lagrange_nodes(p: int) -> np.ndarray:
    if p == 1:
        return REF_VERTICES.copy()
    mids = REF_VERTICES[LOCAL_EDGES].mean(axis=1)
    return np.concatenate([REF_VERTICES, mids])


def lagrange_edge_dofs(p: int, k: int) -> np.ndarray:
    """Local dofs on edge k, ordered along the edge parameter."""
    i, j = LOCAL_EDGES[k]
    return np.array([i, j]) if p == 1 else np.array([i, 3 + k, j])


class LagrangeSpace:
    """Continuous P_p space on a mesh, p in {1, 2}.

    Global numbering: vertices first, then (p = 2) one dof per edge.
    """

    def __init__(self, mesh: Mesh, p: int):
        if p not in (1, 2):
            raise ValueError(f"unsupported Lagrange degree {p}")
        self.mesh = mesh
        self.p = p
        if p == 1:
            self.element_dofs = np.asarray(mesh.elements)
            self.n_dofs = mesh.n_vertices
        else:
            self.element_dofs = np.concatenate([mesh.elements, mesh.n_vertices + mesh.element_edges], axis=1)
            self.n_dofs = mesh.n_vertices + mesh.n_edges
        self.element_dofs.setflags(write=False)

    @property
    def n_local(self) -> int:
        return 3 if self.p == 1 else 6

    @cached_property
    def dof_coordinates(self) -> np.ndarray:
        m = self.mesh
        if self.p == 1:
            return m.vertices.copy()
        return np.concatenate([m.vertices, m.vertices[m.edges].mean(axis=1)])

    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        m = self.mesh
        mask = np.zeros(self.n_dofs, dtype=bool)
        mask[: m.n_vertices] = m.vertices_on(BoundaryKind.DIRICHLET)
        if self.p == 2:
            mask[m.n_vertices + m.edges_of_kind(BoundaryKind.DIRICHLET)] = True
        return mask

    def edge_dofs(self, element: int, k: int) -> np.ndarray:
        return self.element_dofs[element, lagrange_edge_dofs(self.p, k)]

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant of ``fn(points) -> values``; Dirichlet dofs left as computed."""
        return np.asarray(fn(self.dof_coordinates), dtype=float)

    def hat_function(self, a: int) -> np.ndarray:
        """Coefficients of the P1 hat function of vertex ``a`` in this space."""
        c = np.zeros(self.n_dofs)
        c[a] = 1.0
        if self.p == 2:
            touching = np.flatnonzero((self.mesh.edges == a).any(axis=1))
            c[self.mesh.n_vertices + touching] = 0.5
        return c


# --- Raviart-Thomas ---------------------------------------------------------

def _monomials(q: int) -> list[tuple[int, int]]:
    return [(a, d - a) for d in range(q + 1) for a in range(d, -1, -1)]


@lru_cache(maxsize=None)
def _rt_spanning(q: int) -> tuple[tuple, ...]:
    """Spanning set of RT_q: P_q^2 plus x times homogeneous degree-q monomials.

    Each entry is ``(kind, a, b)``: kind 0 -> (x^a y^b, 0), 1 -> (0, x^a y^b),
    2 -> (x, y) x^a y^b, all in centered coordinates.
    """
    span = []
    for a, b in _monomials(q):
        span.append((0, a, b))
        span.append((1, a, b))
    for a in range(q, -1, -1):
        span.append((2, a, q - a))
    return tuple(span)


def _powers(x: np.ndarray, a: int, b: int) -> np.ndarray:
    return x[:, 0] ** a * x[:, 1] ** b


def _centered(x: np.ndarray) -> np.ndarray:
    # monomials about the centroid, scaled to O(1), keep the dof matrices well conditioned
    return 3.0 * (np.atleast_2d(np.asarray(x, dtype=float)) - 1.0 / 3.0)


def _spanning_eval(q: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = _centered(x)
    span = _rt_spanning(q)
    vals = np.zeros((len(X), len(span), 2))
    divs = np.zeros((len(X), len(span)))
    for j, (kind, a, b) in enumerate(span):
        m = _powers(X, a, b)
        if kind == 0:
            vals[:, j, 0] = m
            if a > 0:
                divs[:, j] = 3.0 * a * _powers(X, a - 1, b)
        elif kind == 1:
            vals[:, j, 1] = m
            if b > 0:
                divs[:, j] = 3.0 * b * _powers(X, a, b - 1)
        else:
            vals[:, j, 0] = X[:, 0] * m
            vals[:, j, 1] = X[:, 1] * m
            divs[:, j] = 3.0 * (q + 2) * m
    return vals, divs


def rt_dim(q: int) -> int:
    return (q + 1) * (q + 3)


def rt_dof_functionals(q: int, fields) -> np.ndarray:
    """Apply the RT_q dofs to vector fields ``fields(x) -> (n, m, 2)``.

    Dof order: for each local edge k, q+1 normal moments against shifted
    Legendre polynomials in the edge parameter; then interior moments against
    (m, 0) and (0, m) for monomials m of degree <= q-1.
    Returns ``(n_dofs, m)``.
    """
    er = edge_quadrature(2 * q + 2)
    rows = []
    for k in range(3):
        x = edge_points(k, er.points)
        v = fields(x)
        vn = v @ REF_EDGE_NORMALS[k]
        for j in range(q + 1):
            L = legendre01(j, er.points)
            rows.append(REF_EDGE_LENGTHS[k] * np.einsum("n,n,nm->m", er.weights, L, vn))
    if q > 0:
        tr = quadrature(2 * q)
        v = fields(tr.points)
        for a, b in _monomials(q - 1):
            m = _powers(tr.points, a, b)
            rows.append(np.einsum("n,n,nm->m", tr.weights, m, v[:, :, 0]))
            rows.append(np.einsum("n,n,nm->m", tr.weights, m, v[:, :, 1]))
    return np.array(rows)


@lru_cache(maxsize=None)
def _rt_coefficients(q: int) -> np.ndarray:
    D = rt_dof_functionals(q, lambda x: _spanning_eval(q, x)[0])
    C = np.linalg.inv(D)
    C.setflags(write=False)
    return C


def rt_eval(q: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nodal RT_q basis on the reference triangle.

    Returns values ``(n, dim, 2)`` and divergences ``(n, dim)``.
    """
    if not 0 <= q <= 3:
        raise ValueError(f"unsupported Raviart-Thomas degree {q}")
    C = _rt_coefficients(q)
    vals, divs = _spanning_eval(q, x)
    return np.einsum("nsc,sk->nkc", vals, C), divs @ C


def rt_edge_dof_signs(q: int, outward: np.ndarray, reversed_: np.ndarray) -> np.ndarray:
    """Per-element sign of every local RT dof relative to the global dof.

    ``outward`` (m, 3): +1 if the global edge normal is outward for the element.
    ``reversed_`` (m, 3): local edge parameter runs against the global one.
    Interior dofs always carry +1.
    """
    m = outward.shape[0]
    j = np.arange(q + 1)
    edge = outward[:, :, None] * np.where(reversed_[:, :, None] & (j % 2 == 1)[None, None, :], -1, 1)
    inner = np.ones((m, q * (q + 1)), dtype=edge.dtype)
    return np.concatenate([edge.reshape(m, -1), inner], axis=1)


def piola_push(jacobian: np.ndarray, det: float, values: np.ndarray, divergences: np.ndarray):
    """Contravariant Piola map of reference RT values to a physical element."""
    return values @ jacobian.T / det, divergences / det


class RTSpace:
    """Global H(div)-conforming RT_q dofs on a mesh.

    Edge dofs come first (q+1 per global edge, moments against the global
    edge normal and parameter), then q(q+1) interior dofs per element.
    """

    def __init__(self, mesh: Mesh, q: int):
        self.mesh = mesh
        self.q = q
        ne = q + 1
        ni = q * (q + 1)
        edge_block = mesh.element_edges[:, :, None] * ne + np.arange(ne)[None, None, :]
        inner = mesh.n_edges * ne + np.arange(mesh.n_elements)[:, None] * ni + np.arange(ni)[None, :]
        self.element_dofs = np.concatenate([edge_block.reshape(mesh.n_elements, -1), inner], axis=1)
        self.signs = rt_edge_dof_signs(q, mesh.edge_signs, mesh.edge_reversed).astype(float)
        self.n_dofs = mesh.n_edges * ne + mesh.n_elements * ni

    @property
    def n_local(self) -> int:
        return rt_dim(self.q)

    def edge_dofs(self, e: int) -> np.ndarray:
        return e * (self.q + 1) + np.arange(self.q + 1)


def polynomial_basis(q: int, x: np.ndarray) -> np.ndarray:
    """Centered monomials of degree <= q in reference coordinates; column 0 is the constant."""
    X = _centered(x)
    return np.column_stack([_powers(X, a, b) for a, b in _monomials(q)])


def polynomial_dim(q: int) -> int:
    return (q + 1) * (q + 2) // 2
