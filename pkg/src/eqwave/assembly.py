"""Sparse operators of the semi-discrete wave equation and the SPD solves of the leap-frog step."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import BoundaryKind, Mesh
from .spaces import (
    LagrangeSpace,
    edge_points,
    edge_quadrature,
    lagrange_edge_dofs,
    lagrange_eval,
    quadrature,
)


class MaterialError(ValueError):
    pass


class IndefiniteMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be SPD has a non-positive pivot."""


@dataclass(frozen=True)
class MaterialData:
    """Piecewise-constant coefficients keyed by region tag.

    ``gamma`` is either a constant or a function of the absorbing-face
    midpoint.
    """

    mu: Mapping[int, float]
    A: Mapping[int, np.ndarray]
    gamma: float | Callable[[np.ndarray], float] = 1.0

    def __post_init__(self):
        for r, m in self.mu.items():
            if not m > 0:
                raise MaterialError(f"mu must be positive (region {r})")
        for r, a in self.A.items():
            a = np.asarray(a, dtype=float)
            if a.shape != (2, 2) or not np.allclose(a, a.T):
                raise MaterialError(f"A must be a symmetric 2x2 matrix (region {r})")
            if np.linalg.eigvalsh(a)[0] <= 0:
                raise MaterialError(f"A must be positive definite (region {r})")

    @classmethod
    def uniform(cls, mu: float = 1.0, A=None, gamma=1.0) -> "MaterialData":
        return cls({0: mu}, {0: np.eye(2) if A is None else np.asarray(A, dtype=float)}, gamma)

    def _lookup(self, table: Mapping, regions: np.ndarray, what: str):
        missing = sorted(set(np.unique(regions).tolist()) - set(table))
        if missing:
            raise MaterialError(f"no {what} for region tag(s) {missing}")
        return [table[int(r)] for r in regions]

    def element_mu(self, mesh: Mesh) -> np.ndarray:
        return np.asarray(self._lookup(self.mu, mesh.regions, "mu"), dtype=float)

    def element_A(self, mesh: Mesh) -> np.ndarray:
        return np.asarray(self._lookup(self.A, mesh.regions, "A"), dtype=float).reshape(-1, 2, 2)

    def element_a_min(self, mesh: Mesh) -> np.ndarray:
        return np.linalg.eigvalsh(self.element_A(mesh))[:, 0]

    def element_a_max(self, mesh: Mesh) -> np.ndarray:
        return np.linalg.eigvalsh(self.element_A(mesh))[:, 1]

    def edge_gamma(self, mesh: Mesh) -> np.ndarray:
        """gamma on every absorbing edge, NaN elsewhere."""
        out = np.full(mesh.n_edges, np.nan)
        for e in mesh.edges_of_kind(BoundaryKind.ABSORBING):
            if callable(self.gamma):
                g = float(self.gamma(mesh.vertices[mesh.edges[e]].mean(axis=0)))
            else:
                g = float(self.gamma)
            if not g > 0:
                raise MaterialError(f"gamma must be positive on absorbing edge {e}")
            out[e] = g
        return out


@dataclass(frozen=True)
class BoundaryFaces:
    """Absorbing faces seen from their element, with an edge quadrature."""

    edges: np.ndarray
    elements: np.ndarray
    local: np.ndarray  # local edge index in the element
    points: np.ndarray  # (nf, nq, 2)
    weights: np.ndarray  # (nf, nq), physical
    normals: np.ndarray  # (nf, 2) outward
    param: np.ndarray  # (nq,) local edge parameter of the quadrature points
    ref_points: np.ndarray  # (nf, nq, 2)


def absorbing_faces(mesh: Mesh, degree: int) -> BoundaryFaces:
    edges = mesh.edges_of_kind(BoundaryKind.ABSORBING)
    elems = mesh.edge_elements[edges, 0]
    local = np.array([int(np.flatnonzero(mesh.element_edges[k] == e)[0]) for e, k in zip(edges, elems)], dtype=np.int64)
    er = edge_quadrature(degree)
    ref = np.array([edge_points(k, er.points) for k in local]).reshape(len(edges), len(er.points), 2)
    J = mesh.jacobians[elems]
    x0 = mesh.vertices[mesh.elements[elems, 0]]
    pts = x0[:, None, :] + np.einsum("fij,fqj->fqi", J, ref)
    w = mesh.edge_lengths[edges][:, None] * er.weights[None, :]
    normals = mesh.edge_normals[edges] * mesh.edge_signs[elems, local][:, None]
    return BoundaryFaces(edges, elems, local, pts, w, normals, er.points, ref)


class ElementQuadrature:
    """Basis data of a Lagrange space at the quadrature points of every element."""

    def __init__(self, space: LagrangeSpace, degree: int):
        mesh = space.mesh
        rule = quadrature(degree)
        self.space = space
        self.rule = rule
        vals, grads = lagrange_eval(space.p, rule.points)
        self.values = vals  # (nq, nloc)
        self.ref_grads = grads
        x0 = mesh.vertices[mesh.elements[:, 0]]
        self.points = x0[:, None, :] + np.einsum("kij,qj->kqi", mesh.jacobians, rule.points)
        self.weights = mesh.dets[:, None] * rule.weights[None, :]
        # physical gradient = J^{-T} reference gradient
        self.grads = np.einsum("kji,qlj->kqli", mesh.inverse_jacobians, grads)

    @property
    def n_points(self) -> int:
        return len(self.rule.weights)

    @cached_property
    def value_map(self) -> sp.csr_matrix:
        """Sparse map from global coefficients to values at all (element, point) pairs."""
        ne, nq, nl = len(self.points), self.n_points, self.values.shape[1]
        rows = np.repeat(np.arange(ne * nq), nl)
        cols = np.repeat(self.space.element_dofs[:, None, :], nq, axis=1).reshape(-1)
        data = np.broadcast_to(self.values, (ne, nq, nl)).reshape(-1)
        return sp.csr_matrix((data, (rows, cols)), shape=(ne * nq, self.space.n_dofs))

    @cached_property
    def gradient_map(self) -> sp.csr_matrix:
        """Sparse map to gradients, rows ordered (element, point, component)."""
        ne, nq, nl = len(self.points), self.n_points, self.values.shape[1]
        rows = np.repeat(np.arange(ne * nq * 2), nl)
        cols = np.repeat(self.space.element_dofs[:, None, None, :], nq, axis=1)
        cols = np.broadcast_to(cols, (ne, nq, 2, nl)).reshape(-1)
        data = self.grads.transpose(0, 1, 3, 2).reshape(-1)
        return sp.csr_matrix((data, (rows, cols)), shape=(ne * nq * 2, self.space.n_dofs))


def _scatter(space: LagrangeSpace, local: np.ndarray) -> sp.csr_matrix:
    dofs = space.element_dofs
    nl = dofs.shape[1]
    rows = np.repeat(dofs, nl, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, nl)).reshape(-1)
    return sp.csr_matrix((local.reshape(-1), (rows, cols)), shape=(space.n_dofs, space.n_dofs))


def element_mass_matrices(space: LagrangeSpace, materials: MaterialData) -> np.ndarray:
    q = ElementQuadrature(space, 2 * space.p + 2)
    mu = materials.element_mu(space.mesh)
    ref = np.einsum("q,qi,qj->ij", q.rule.weights, q.values, q.values)
    return (mu * space.mesh.dets)[:, None, None] * ref[None]


def element_stiffness_matrices(space: LagrangeSpace, materials: MaterialData) -> np.ndarray:
    q = ElementQuadrature(space, 2 * space.p + 2)
    A = materials.element_A(space.mesh)
    return np.einsum("kq,kqia,kab,kqjb->kij", q.weights, q.grads, A, q.grads)


def assemble_mass(space: LagrangeSpace, materials: MaterialData) -> sp.csr_matrix:
    """Matrix of (mu u, v) over the domain."""
    return _scatter(space, element_mass_matrices(space, materials))


def assemble_stiffness(space: LagrangeSpace, materials: MaterialData) -> sp.csr_matrix:
    """Matrix of (A grad u, grad v) over the domain."""
    return _scatter(space, element_stiffness_matrices(space, materials))


def assemble_boundary_mass(space: LagrangeSpace, materials: MaterialData) -> sp.csr_matrix:
    """Matrix of (gamma u, v) over the absorbing boundary."""
    mesh = space.mesh
    faces = absorbing_faces(mesh, 2 * space.p + 2)
    n = space.n_dofs
    if len(faces.edges) == 0:
        return sp.csr_matrix((n, n))
    gamma = materials.edge_gamma(mesh)[faces.edges]
    rows, cols, data = [], [], []
    for f in range(len(faces.edges)):
        vals, _ = lagrange_eval(space.p, faces.ref_points[f])
        loc = lagrange_edge_dofs(space.p, faces.local[f])
        phi = vals[:, loc]
        block = gamma[f] * np.einsum("q,qi,qj->ij", faces.weights[f], phi, phi)
        dofs = space.element_dofs[faces.elements[f], loc]
        rows.append(np.repeat(dofs, len(dofs)))
        cols.append(np.tile(dofs, len(dofs)))
        data.append(block.reshape(-1))
    return sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def edge_lagrange_basis(p: int, s: np.ndarray) -> np.ndarray:
    """Trace of the element basis on an edge, dofs ordered along the edge parameter."""
    s = np.asarray(s)
    if p == 1:
        return np.column_stack([1.0 - s, s])
    return np.column_stack([(1.0 - s) * (1.0 - 2.0 * s), 4.0 * s * (1.0 - s), s * (2.0 * s - 1.0)])


class LoadAssembler:
    """Right-hand side (mu f(t), v) + (gamma g(t), v)_A and the matching data projections.

    The load vector and the elementwise/facewise P_p projections use one and
    the same quadrature, so testing the projected data against any P_p
    function reproduces the load exactly.
    """

    def __init__(self, space: LagrangeSpace, materials: MaterialData):
        mesh = space.mesh
        p = space.p
        self.space = space
        self.quad = ElementQuadrature(space, 2 * p + 2)
        self.faces = absorbing_faces(mesh, 2 * p + 2)
        self.mu = materials.element_mu(mesh)
        self.gamma = materials.edge_gamma(mesh)[self.faces.edges]
        q = self.quad
        ne, nq, nl = len(q.points), q.n_points, q.values.shape[1]
        rows = np.repeat(space.element_dofs[:, None, :], nq, axis=1).reshape(-1)
        cols = np.repeat(np.arange(ne * nq), nl)
        data = ((self.mu[:, None] * q.weights)[:, :, None] * q.values[None]).reshape(-1)
        self._volume = sp.csr_matrix((data, (rows, cols)), shape=(space.n_dofs, ne * nq))

        W = q.rule.weights
        Phi = q.values
        self.element_projection = np.linalg.solve(Phi.T @ (W[:, None] * Phi), Phi.T * W[None, :])

        nf = len(self.faces.edges)
        phi_e = edge_lagrange_basis(p, self.faces.param)
        ew = edge_quadrature(2 * p + 2).weights
        self.face_projection = np.linalg.solve(phi_e.T @ (ew[:, None] * phi_e), phi_e.T * ew[None, :])
        self.face_dofs = np.array(
            [space.element_dofs[k, lagrange_edge_dofs(p, j)] for k, j in zip(self.faces.elements, self.faces.local)],
            dtype=np.int64,
        ).reshape(nf, p + 1)
        nqe = len(self.faces.param)
        rows = np.repeat(self.face_dofs[:, None, :], nqe, axis=1).reshape(-1)
        cols = np.repeat(np.arange(nf * nqe), p + 1)
        data = ((self.gamma[:, None] * self.faces.weights)[:, :, None] * phi_e[None]).reshape(-1)
        self._boundary = sp.csr_matrix((data, (rows, cols)), shape=(space.n_dofs, nf * nqe))

    def sample(self, f, g, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Values of f at element points (ne, nq) and of g at face points (nf, nqe)."""
        fv = np.zeros(self.quad.points.shape[:2]) if f is None else np.asarray(f(t, self.quad.points), dtype=float)
        nf, nqe = self.faces.points.shape[:2]
        if g is None or nf == 0:
            gv = np.zeros((nf, nqe))
        else:
            normals = np.broadcast_to(self.faces.normals[:, None, :], self.faces.points.shape)
            gv = np.asarray(g(t, self.faces.points, normals), dtype=float)
        return fv, gv

    def vector(self, fvals: np.ndarray, gvals: np.ndarray) -> np.ndarray:
        F = self._volume @ fvals.reshape(-1)
        if gvals.size:
            F = F + self._boundary @ gvals.reshape(-1)
        F[self.space.dirichlet_mask] = 0.0
        return F

    def project(self, fvals: np.ndarray, gvals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Elementwise P_p coefficients (ne, nloc) of f and facewise (nf, p+1) of g."""
        return fvals @ self.element_projection.T, gvals @ self.face_projection.T


def assemble_loads(space: LagrangeSpace, materials: MaterialData, f, g, t: float) -> np.ndarray:
    la = LoadAssembler(space, materials)
    return la.vector(*la.sample(f, g, t))


def apply_dirichlet(matrix: sp.spmatrix, mask: np.ndarray) -> sp.csr_matrix:
    """Zero the masked rows and columns and put ones on their diagonal."""
    keep = sp.diags((~mask).astype(float))
    return (keep @ matrix @ keep + sp.diags(mask.astype(float))).tocsr()


class SolverHandle:
    """Direct factorization of a fixed SPD matrix.

    SuperLU runs with a symmetric ordering and no off-diagonal pivoting, so
    the diagonal of U carries the LDL^T pivots and indefiniteness shows up
    as a non-positive one.
    """

    def __init__(self, matrix: sp.spmatrix, pivot_tol: float = 1e-12):
        A = sp.csc_matrix(matrix)
        if abs(A - A.T).max() > 1e-12 * max(abs(A).max(), 1e-300):
            raise IndefiniteMatrixError("matrix is not symmetric")
        self.matrix = A
        try:
            self._lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise IndefiniteMatrixError(f"factorization failed: {exc}") from None
        pivots = self._lu.U.diagonal()
        scale = np.abs(A.diagonal()).max()
        bad = pivots <= pivot_tol * scale
        if bad.any():
            raise IndefiniteMatrixError(
                f"matrix is not positive definite: pivot {pivots[bad].min():.3e} at position {int(np.flatnonzero(bad)[0])}"
            )

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=float))


class CGSolver:
    """Jacobi-preconditioned conjugate gradient for large SPD systems."""

    def __init__(self, matrix: sp.spmatrix, tol: float = 1e-12, maxiter: int | None = None):
        self.matrix = sp.csr_matrix(matrix)
        d = self.matrix.diagonal()
        if (d <= 0).any():
            raise IndefiniteMatrixError("non-positive diagonal entry")
        self._precond = spla.LinearOperator(self.matrix.shape, matvec=lambda x: x / d)
        self.tol = tol
        self.maxiter = maxiter or 10 * self.matrix.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x, info = spla.cg(self.matrix, rhs, rtol=self.tol, atol=0.0, maxiter=self.maxiter, M=self._precond)
        if info != 0:
            raise np.linalg.LinAlgError(f"conjugate gradient did not converge (info={info})")
        return x


def factorize_spd(matrix: sp.spmatrix, method: str = "cholesky") -> SolverHandle | CGSolver:
    if method == "cholesky":
        return SolverHandle(matrix)
    if method == "cg":
        return CGSolver(matrix)
    raise ValueError(f"unknown solver {method!r}")


def solve(handle: SolverHandle | CGSolver, rhs: np.ndarray) -> np.ndarray:
    return handle.solve(rhs)
