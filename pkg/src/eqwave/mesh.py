"""Triangular meshes: generation, Triangle-format ingestion, vertex patches."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np


class MeshError(ValueError):
    """Invalid mesh input (parse error, bad connectivity, degenerate element)."""


class BoundaryKind(enum.IntEnum):
    DIRICHLET = 0
    ABSORBING = 1


class PatchClass(enum.Enum):
    INTERIOR = "interior"
    TOUCHES_DIRICHLET = "touches_dirichlet"
    BOUNDARY_NO_DIRICHLET = "boundary_no_dirichlet"


BoundaryRule = Callable[[np.ndarray], BoundaryKind]

# local edge k is opposite local vertex k, stored (lower, higher) local index
LOCAL_EDGES = np.array([[1, 2], [0, 2], [0, 1]])


def all_dirichlet(midpoint: np.ndarray) -> BoundaryKind:
    return BoundaryKind.DIRICHLET


def all_absorbing(midpoint: np.ndarray) -> BoundaryKind:
    return BoundaryKind.ABSORBING


@dataclass(frozen=True)
class ElementGeometry:
    """Geometry of one triangle and its affine map from the reference element."""

    h: float
    rho: float
    area: float
    normals: np.ndarray  # (3, 2) outward unit normals, row k for local edge k
    jacobian: np.ndarray  # (2, 2), columns v1 - v0 and v2 - v0
    offset: np.ndarray  # v0
    det: float

    @property
    def shape_regularity(self) -> float:
        return self.h / self.rho


@dataclass(frozen=True)
class Patch:
    vertex: int
    elements: np.ndarray
    interior_edges: np.ndarray
    dirichlet_edges: np.ndarray
    absorbing_edges: np.ndarray
    outer_edges: np.ndarray  # patch boundary edges lying inside the domain
    cls: PatchClass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with counterclockwise elements.

    ``edges`` holds sorted vertex pairs; ``element_edges[k, i]`` is the edge
    opposite local vertex ``i`` of element ``k``. ``boundary_kind`` is -1 on
    interior edges.
    """

    vertices: np.ndarray
    elements: np.ndarray
    regions: np.ndarray
    edges: np.ndarray
    element_edges: np.ndarray
    edge_elements: np.ndarray
    boundary_kind: np.ndarray

    @classmethod
    def from_arrays(
        cls,
        vertices: np.ndarray,
        elements: np.ndarray,
        regions: np.ndarray | None = None,
        bc_rule: BoundaryRule = all_dirichlet,
    ) -> "Mesh":
        vertices = np.ascontiguousarray(vertices, dtype=float)
        elements = np.array(elements, dtype=np.int64, copy=True)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be an (n, 2) array")
        if elements.ndim != 2 or elements.shape[1] != 3:
            raise MeshError("elements must be an (m, 3) array")
        if elements.min() < 0 or elements.max() >= len(vertices):
            raise MeshError("element references a vertex that does not exist")
        if regions is None:
            regions = np.zeros(len(elements), dtype=np.int64)
        regions = np.asarray(regions, dtype=np.int64)

        p = vertices[elements]
        signed = 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )
        scale = np.ptp(vertices, axis=0).max() ** 2
        degenerate = np.abs(signed) <= 1e-14 * scale
        if degenerate.any():
            k = int(np.flatnonzero(degenerate)[0])
            raise MeshError(f"element {k} is degenerate (zero area)")
        flip = signed < 0
        elements[flip, 1], elements[flip, 2] = elements[flip, 2], elements[flip, 1].copy()

        pairs = np.sort(elements[:, LOCAL_EDGES], axis=2).reshape(-1, 2)
        edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if counts.max() > 2:
            e = edges[np.argmax(counts)]
            raise MeshError(f"non-conforming connectivity: edge {tuple(e)} shared by more than two elements")
        element_edges = inverse.reshape(-1, 3)

        edge_elements = -np.ones((len(edges), 2), dtype=np.int64)
        owner = np.repeat(np.arange(len(elements)), 3)
        order = np.argsort(inverse, kind="stable")
        first = np.ones(len(order), dtype=bool)
        first[1:] = inverse[order][1:] != inverse[order][:-1]
        edge_elements[inverse[order][first], 0] = owner[order][first]
        edge_elements[inverse[order][~first], 1] = owner[order][~first]

        boundary = np.flatnonzero(edge_elements[:, 1] < 0)
        _check_no_hanging_nodes(vertices, edges[boundary])
        kinds = -np.ones(len(edges), dtype=np.int64)
        for e in boundary:
            mid = vertices[edges[e]].mean(axis=0)
            kinds[e] = int(BoundaryKind(bc_rule(mid)))

        for arr in (vertices, elements, regions, edges, element_edges, edge_elements, kinds):
            arr.setflags(write=False)
        return cls(vertices, elements, regions, edges, element_edges, edge_elements, kinds)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_kind >= 0)

    def edges_of_kind(self, kind: BoundaryKind) -> np.ndarray:
        return np.flatnonzero(self.boundary_kind == int(kind))

    @property
    def boundary_faces(self) -> list[tuple[tuple[int, int], int, BoundaryKind]]:
        return [
            ((int(self.edges[e, 0]), int(self.edges[e, 1])), int(self.edge_elements[e, 0]), BoundaryKind(self.boundary_kind[e]))
            for e in self.boundary_edges
        ]

    @cached_property
    def jacobians(self) -> np.ndarray:
        p = self.vertices[self.elements]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)

    @cached_property
    def dets(self) -> np.ndarray:
        J = self.jacobians
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    @cached_property
    def inverse_jacobians(self) -> np.ndarray:
        return np.linalg.inv(self.jacobians)

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * self.dets

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def diameters(self) -> np.ndarray:
        return self.edge_lengths[self.element_edges].max(axis=1)

    @cached_property
    def inradius_diameters(self) -> np.ndarray:
        semi = 0.5 * self.edge_lengths[self.element_edges].sum(axis=1)
        return 2.0 * self.areas / semi

    @cached_property
    def edge_normals(self) -> np.ndarray:
        """Unit normal of each edge, rotated clockwise from lower to higher vertex."""
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.stack([d[:, 1], -d[:, 0]], axis=1) / self.edge_lengths[:, None]

    @cached_property
    def edge_signs(self) -> np.ndarray:
        """+1 where the edge normal points out of the element, per (element, local edge)."""
        centroids = self.vertices[self.elements].mean(axis=1)
        mids = self.vertices[self.edges[self.element_edges]].mean(axis=2)
        n = self.edge_normals[self.element_edges]
        out = np.einsum("kij,kij->ki", n, mids - centroids[:, None, :])
        return np.where(out > 0, 1, -1)

    @cached_property
    def edge_reversed(self) -> np.ndarray:
        """True where local edge orientation (lower to higher local index) opposes the global one."""
        loc = self.elements[:, LOCAL_EDGES]
        return loc[:, :, 0] > loc[:, :, 1]

    @cached_property
    def vertex_elements(self) -> list[np.ndarray]:
        flat = self.elements.reshape(-1)
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(self.n_vertices + 1))
        owners = order // 3
        return [owners[bounds[v]:bounds[v + 1]] for v in range(self.n_vertices)]

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].reshape(-1)] = True
        return mask

    def vertices_on(self, kind: BoundaryKind) -> np.ndarray:
        """Mask of vertices in the closure of the boundary part of the given kind."""
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.edges_of_kind(kind)].reshape(-1)] = True
        return mask

    def total_area(self) -> float:
        return float(self.areas.sum())


def _check_no_hanging_nodes(vertices: np.ndarray, boundary_pairs: np.ndarray) -> None:
    if len(boundary_pairs) == 0:
        return
    scale = np.ptp(vertices, axis=0).max()
    for a, b in boundary_pairs:
        pa, pb = vertices[a], vertices[b]
        d = pb - pa
        length2 = d @ d
        rel = vertices - pa
        s = rel @ d / length2
        cross = rel[:, 0] * d[1] - rel[:, 1] * d[0]
        on = (np.abs(cross) <= 1e-12 * scale * np.sqrt(length2)) & (s > 1e-12) & (s < 1 - 1e-12)
        if on.any():
            v = int(np.flatnonzero(on)[0])
            raise MeshError(f"non-conforming connectivity: vertex {v} hangs on edge ({a}, {b})")


def element_geometry(mesh: Mesh, k: int) -> ElementGeometry:
    if not 0 <= k < mesh.n_elements:
        raise IndexError(f"element {k} out of range")
    J = mesh.jacobians[k]
    det = float(mesh.dets[k])
    if det <= 0:
        raise MeshError(f"element {k} is degenerate (zero area)")
    normals = mesh.edge_normals[mesh.element_edges[k]] * mesh.edge_signs[k][:, None]
    return ElementGeometry(
        h=float(mesh.diameters[k]),
        rho=float(mesh.inradius_diameters[k]),
        area=0.5 * det,
        normals=normals,
        jacobian=J.copy(),
        offset=mesh.vertices[mesh.elements[k, 0]].copy(),
        det=det,
    )


def generate_square(
    xmin: float,
    xmax: float,
    n: int,
    pattern: str = "diagonal",
    bc_rule: BoundaryRule = all_dirichlet,
) -> Mesh:
    """Structured triangulation of the square ``(xmin, xmax)^2`` with ``n`` cells per side.

    ``pattern="diagonal"`` splits every cell along its ascending diagonal;
    ``"crisscross"`` adds the cell center and splits the cell into four.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not xmin < xmax:
        raise ValueError("xmin must be smaller than xmax")
    if pattern not in ("diagonal", "crisscross"):
        raise ValueError(f"unknown pattern {pattern!r}")

    t = np.linspace(xmin, xmax, n + 1)
    X, Y = np.meshgrid(t, t, indexing="xy")
    verts = [np.column_stack([X.ravel(), Y.ravel()])]
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i, j = i.ravel(), j.ravel()
    v00 = i + j * (n + 1)
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    if pattern == "diagonal":
        tris = np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    else:
        c = 0.5 * (t[:-1] + t[1:])
        CX, CY = np.meshgrid(c, c, indexing="xy")
        verts.append(np.column_stack([CX.ravel(), CY.ravel()]))
        vc = (n + 1) ** 2 + i + j * n
        tris = np.concatenate(
            [
                np.column_stack([v00, v10, vc]),
                np.column_stack([v10, v11, vc]),
                np.column_stack([v11, v01, vc]),
                np.column_stack([v01, v00, vc]),
            ]
        )
    return Mesh.from_arrays(np.concatenate(verts), tris, bc_rule=bc_rule)


def _data_lines(text: str) -> list[tuple[int, list[str]]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append((lineno, line.split()))
    return out


def _parse_int(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise MeshError(f"line {lineno}: expected integer {what}, got {tok!r}") from None


def _parse_float(tok: str, lineno: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise MeshError(f"line {lineno}: expected number {what}, got {tok!r}") from None


def read_mesh(node_text: str, ele_text: str, bc_rule: BoundaryRule = all_dirichlet) -> Mesh:
    """Build a mesh from Triangle ``.node`` / ``.ele`` file contents.

    Ids may start at 0 or 1 (detected from the first node id). The first
    element attribute, if any, becomes the region tag.
    """
    nodes = _data_lines(node_text)
    if not nodes:
        raise MeshError("line 1: empty .node input")
    lineno, head = nodes[0]
    if len(head) < 2:
        raise MeshError(f"line {lineno}: .node header needs at least '<#points> 2'")
    npts = _parse_int(head[0], lineno, "point count")
    if _parse_int(head[1], lineno, "dimension") != 2:
        raise MeshError(f"line {lineno}: only 2D .node files are supported")
    if len(nodes) - 1 < npts:
        raise MeshError(f"line {nodes[-1][0]}: expected {npts} points, found {len(nodes) - 1}")
    ids = np.empty(npts, dtype=np.int64)
    xy = np.empty((npts, 2))
    for r, (lineno, toks) in enumerate(nodes[1:npts + 1]):
        if len(toks) < 3:
            raise MeshError(f"line {lineno}: node row needs '<id> <x> <y>'")
        ids[r] = _parse_int(toks[0], lineno, "node id")
        xy[r] = _parse_float(toks[1], lineno, "x"), _parse_float(toks[2], lineno, "y")
    base = int(ids[0])
    if base not in (0, 1):
        raise MeshError(f"line {nodes[1][0]}: first node id must be 0 or 1")
    if not np.array_equal(ids, np.arange(base, base + npts)):
        raise MeshError(f"line {nodes[1][0]}: node ids must be consecutive")

    eles = _data_lines(ele_text)
    if not eles:
        raise MeshError("line 1: empty .ele input")
    lineno, head = eles[0]
    if len(head) < 2:
        raise MeshError(f"line {lineno}: .ele header needs '<#tris> 3 [<#attrs>]'")
    ntri = _parse_int(head[0], lineno, "triangle count")
    if _parse_int(head[1], lineno, "nodes per triangle") != 3:
        raise MeshError(f"line {lineno}: only 3-node triangles are supported")
    nattr = _parse_int(head[2], lineno, "attribute count") if len(head) > 2 else 0
    if len(eles) - 1 < ntri:
        raise MeshError(f"line {eles[-1][0]}: expected {ntri} triangles, found {len(eles) - 1}")
    tris = np.empty((ntri, 3), dtype=np.int64)
    regions = np.zeros(ntri, dtype=np.int64)
    for r, (lineno, toks) in enumerate(eles[1:ntri + 1]):
        if len(toks) < 4 + (1 if nattr else 0):
            raise MeshError(f"line {lineno}: triangle row too short")
        for c in range(3):
            v = _parse_int(toks[1 + c], lineno, "vertex id") - base
            if not 0 <= v < npts:
                raise MeshError(f"line {lineno}: vertex id {toks[1 + c]} out of range")
            tris[r, c] = v
        if nattr:
            regions[r] = int(round(_parse_float(toks[4], lineno, "attribute")))
    return Mesh.from_arrays(xy, tris, regions, bc_rule)


def build_patches(mesh: Mesh) -> list[Patch]:
    """One vertex patch per mesh vertex, in vertex order."""
    on_dirichlet = mesh.vertices_on(BoundaryKind.DIRICHLET)
    patches = []
    for a, elems in enumerate(mesh.vertex_elements):
        elems = np.sort(elems)
        edges = np.unique(mesh.element_edges[elems].reshape(-1))
        inside = np.isin(mesh.edge_elements[edges], elems) | (mesh.edge_elements[edges] < 0)
        interior = edges[inside.all(axis=1) & (mesh.edge_elements[edges, 1] >= 0)]
        kinds = mesh.boundary_kind[edges]
        dirichlet = edges[kinds == BoundaryKind.DIRICHLET]
        absorbing = edges[kinds == BoundaryKind.ABSORBING]
        outer = edges[(kinds < 0) & ~inside.all(axis=1)]
        if not mesh.boundary_vertices[a]:
            cls = PatchClass.INTERIOR
        elif on_dirichlet[a]:
            cls = PatchClass.TOUCHES_DIRICHLET
        else:
            cls = PatchClass.BOUNDARY_NO_DIRICHLET
        patches.append(Patch(a, elems, interior, dirichlet, absorbing, outer, cls))
    return patches
