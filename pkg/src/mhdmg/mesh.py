"""Structured triangular meshes: construction, refinement, topology queries.

Two structured families are supported: "diagonal" meshes split each
quadrilateral along the (+1,+1) diagonal, "crossed" meshes cut each
quadrilateral into four triangles around a center vertex.  Meshes are
immutable after construction; uniform refinement returns a new mesh that
records its lineage so that grid-transfer operators can locate parent
entities in O(1).

Edges carry a canonical global orientation from the lower vertex id to the
higher vertex id.  Periodic identification is done at the topology level:
identified entities share a single equivalence class, which downstream
degree-of-freedom maps use directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np


class BoundaryTag(IntEnum):
    INTERIOR = 0
    LEFT = 1
    RIGHT = 2
    BOTTOM = 3
    TOP = 4


@dataclass(frozen=True)
class MeshFamily:
    """Structured family descriptor: kind is 'diagonal' or 'crossed'."""

    kind: str
    nx: int
    ny: int
    domain: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("diagonal", "crossed"):
            raise ValueError(f"unknown mesh kind {self.kind!r}")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("nx and ny must be >= 1")
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ValueError("degenerate domain")


@dataclass
class Lineage:
    """Refinement lineage from a child mesh back to its parent.

    vertex_kind is 0 where the child vertex copies a parent vertex and 1
    where it is the midpoint of a parent edge; vertex_parent holds the
    corresponding parent entity id.
    """

    cell_parent: np.ndarray
    vertex_kind: np.ndarray
    vertex_parent: np.ndarray


class MeshError(Exception):
    pass


class Mesh:
    """Conforming triangle mesh with canonical edge orientation.

    Parameters are raw arrays; edges, cell_edges and edge/vertex adjacency
    are derived here.  `vertex_pairs`/`edge_pairs` list periodic (slave,
    master) identifications; `vertex_class`/`edge_class` compress entities
    into equivalence classes (identity when no periodicity).
    """

    def __init__(self, vertices, cells, vertex_tag=None, edge_tag=None,
                 vertex_pairs=None, edge_pairs=None, parent=None, domain=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.cells = np.asarray(cells, dtype=np.int64)
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise MeshError("cells must be (nc, 3)")
        self.parent: Optional[Lineage] = parent
        self.domain = domain

        # local edge k is opposite local vertex k
        pairs = np.stack([self.cells[:, [1, 2]],
                          self.cells[:, [0, 2]],
                          self.cells[:, [0, 1]]], axis=1)
        pairs = np.sort(pairs.reshape(-1, 2), axis=1)
        self.edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        self.cell_edges = inv.reshape(-1, 3).astype(np.int64)

        sa = self.signed_areas()
        if np.any(sa <= 0.0):
            bad = int(np.argmin(sa))
            raise MeshError(f"cell {bad} has non-positive area {sa[bad]:g}")

        # edge -> incident cells (up to 2, -1 padding)
        ne = len(self.edges)
        counts = np.zeros(ne, dtype=np.int64)
        self.edge_cells = -np.ones((ne, 2), dtype=np.int64)
        order = np.argsort(self.cell_edges.ravel(), kind="stable")
        flat = self.cell_edges.ravel()[order]
        cell_of = order // 3
        starts = np.searchsorted(flat, np.arange(ne))
        ends = np.searchsorted(flat, np.arange(ne) + 1)
        counts = ends - starts
        if np.any(counts > 2):
            raise MeshError("non-manifold edge")
        self.edge_cells[counts >= 1, 0] = cell_of[starts[counts >= 1]]
        self.edge_cells[counts == 2, 1] = cell_of[starts[counts == 2] + 1]

        self.vertex_tag = (np.zeros(len(self.vertices), dtype=np.uint8)
                           if vertex_tag is None else np.asarray(vertex_tag, dtype=np.uint8))
        self.edge_tag = (np.zeros(ne, dtype=np.uint8)
                         if edge_tag is None else np.asarray(edge_tag, dtype=np.uint8))

        self.vertex_pairs = (np.zeros((0, 2), dtype=np.int64) if vertex_pairs is None
                             else np.asarray(vertex_pairs, dtype=np.int64).reshape(-1, 2))
        self.edge_pairs = (np.zeros((0, 2), dtype=np.int64) if edge_pairs is None
                           else np.asarray(edge_pairs, dtype=np.int64).reshape(-1, 2))
        self._build_classes()
        self._vertex_cells = None

    # -- periodic equivalence classes ------------------------------------

    def _build_classes(self):
        nv, ne = len(self.vertices), len(self.edges)
        vrep = np.arange(nv, dtype=np.int64)
        vrep[self.vertex_pairs[:, 0]] = self.vertex_pairs[:, 1]
        erep = np.arange(ne, dtype=np.int64)
        erep[self.edge_pairs[:, 0]] = self.edge_pairs[:, 1]
        # one hop suffices: masters are never slaves for a single direction
        if np.any(vrep[vrep] != vrep) or np.any(erep[erep] != erep):
            raise MeshError("periodic identification is not a one-level map")
        self.vertex_rep = vrep
        self.edge_rep = erep
        uniq_v, vclass = np.unique(vrep, return_inverse=True)
        uniq_e, eclass = np.unique(erep, return_inverse=True)
        self.vertex_class = vclass.astype(np.int64)
        self.edge_class = eclass.astype(np.int64)
        self.class_vertex = uniq_v          # representative raw vertex per class
        self.class_edge = uniq_e
        self.n_vertex_classes = len(uniq_v)
        self.n_edge_classes = len(uniq_e)

    @property
    def periodic(self) -> bool:
        return len(self.vertex_pairs) > 0

    # -- geometry ---------------------------------------------------------

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    # -- topology ---------------------------------------------------------

    def _vertex_cell_adjacency(self):
        """CSR-style map vertex class -> incident cells (periodic-aware)."""
        if self._vertex_cells is None:
            vc = self.vertex_class[self.cells].ravel()
            cell_ids = np.repeat(np.arange(len(self.cells)), 3)
            order = np.argsort(vc, kind="stable")
            vc_sorted = vc[order]
            ptr = np.searchsorted(vc_sorted, np.arange(self.n_vertex_classes + 1))
            self._vertex_cells = (ptr, cell_ids[order])
        return self._vertex_cells

    def vertex_star_cells(self, v: int) -> np.ndarray:
        """Cells incident to vertex v (all members of its periodic class)."""
        if not (0 <= v < len(self.vertices)):
            raise MeshError(f"invalid vertex id {v}")
        ptr, cells = self._vertex_cell_adjacency()
        k = self.vertex_class[v]
        return np.unique(cells[ptr[k]:ptr[k + 1]])

    def vertex_star_closure(self, v):
        """Cells containing v plus all edges and vertices of those cells."""
        star = self.vertex_star_cells(v)
        edges = np.unique(self.cell_edges[star])
        verts = np.unique(self.cells[star])
        return star, edges, verts

    def validate(self):
        """Check mesh invariants; raises MeshError on failure."""
        if np.any(self.edges[:, 0] >= self.edges[:, 1]):
            raise MeshError("edge endpoints not sorted")
        # per-class incidence: 1 (true boundary) or 2 (interior / identified)
        ne_c = self.n_edge_classes
        counts = np.zeros(ne_c, dtype=np.int64)
        np.add.at(counts, self.edge_class, (self.edge_cells >= 0).sum(axis=1))
        if np.any(counts < 1) or np.any(counts > 2):
            raise MeshError("edge class with cell count outside {1,2}")

    # -- io ----------------------------------------------------------------

    def export_text(self, path):
        """Plain-text dump (vertices, cells, tags) for debugging."""
        with open(path, "w") as fh:
            fh.write(f"# mesh: {len(self.vertices)} vertices, "
                     f"{len(self.cells)} cells, {len(self.edges)} edges\n")
            fh.write("vertices\n")
            for i, (x, y) in enumerate(self.vertices):
                fh.write(f"{i} {x:.17g} {y:.17g} {BoundaryTag(self.vertex_tag[i]).name}\n")
            fh.write("cells\n")
            for i, c in enumerate(self.cells):
                fh.write(f"{i} {c[0]} {c[1]} {c[2]}\n")
            fh.write("edges\n")
            for i, e in enumerate(self.edges):
                fh.write(f"{i} {e[0]} {e[1]} {BoundaryTag(self.edge_tag[i]).name}\n")
            if self.periodic:
                fh.write("periodic_vertex_pairs\n")
                for s, m in self.vertex_pairs:
                    fh.write(f"{s} {m}\n")
                fh.write("periodic_edge_pairs\n")
                for s, m in self.edge_pairs:
                    fh.write(f"{s} {m}\n")


# -- construction ----------------------------------------------------------

def _classify(mesh: Mesh, domain):
    """Assign boundary tags geometrically on a freshly built mesh."""
    x0, x1, y0, y1 = domain
    tol = 1e-12 * max(x1 - x0, y1 - y0)
    v = mesh.vertices
    vt = np.zeros(len(v), dtype=np.uint8)
    on_b = np.abs(v[:, 1] - y0) <= tol
    on_t = np.abs(v[:, 1] - y1) <= tol
    on_l = np.abs(v[:, 0] - x0) <= tol
    on_r = np.abs(v[:, 0] - x1) <= tol
    # bottom/top take precedence at corners so that corner vertices stay in
    # the wall Dirichlet set when left/right get identified periodically
    vt[on_l] = BoundaryTag.LEFT
    vt[on_r] = BoundaryTag.RIGHT
    vt[on_b] = BoundaryTag.BOTTOM
    vt[on_t] = BoundaryTag.TOP

    et = np.zeros(len(mesh.edges), dtype=np.uint8)
    bdry = mesh.edge_cells[:, 1] < 0
    mid = 0.5 * (v[mesh.edges[:, 0]] + v[mesh.edges[:, 1]])
    et[bdry & (np.abs(mid[:, 0] - x0) <= tol)] = BoundaryTag.LEFT
    et[bdry & (np.abs(mid[:, 0] - x1) <= tol)] = BoundaryTag.RIGHT
    et[bdry & (np.abs(mid[:, 1] - y0) <= tol)] = BoundaryTag.BOTTOM
    et[bdry & (np.abs(mid[:, 1] - y1) <= tol)] = BoundaryTag.TOP
    mesh.vertex_tag = vt
    mesh.edge_tag = et


def build_structured(family: MeshFamily) -> Mesh:
    """Build a diagonal or crossed structured mesh of the given family."""
    nx, ny = family.nx, family.ny
    x0, x1, y0, y1 = family.domain
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys)                     # row-major: id = j*(nx+1)+i
    verts = np.column_stack([gx.ravel(), gy.ravel()])

    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    a = jj * (nx + 1) + ii
    b = a + 1
    c = b + (nx + 1)
    d = a + (nx + 1)
    a, b, c, d = a.ravel(), b.ravel(), c.ravel(), d.ravel()

    if family.kind == "diagonal":
        cells = np.empty((2 * nx * ny, 3), dtype=np.int64)
        cells[0::2] = np.column_stack([a, b, c])
        cells[1::2] = np.column_stack([a, c, d])
    else:
        m = (nx + 1) * (ny + 1) + np.arange(nx * ny)
        centers = 0.5 * (verts[a] + verts[c])
        verts = np.vstack([verts, centers])
        cells = np.empty((4 * nx * ny, 3), dtype=np.int64)
        cells[0::4] = np.column_stack([a, b, m])
        cells[1::4] = np.column_stack([b, c, m])
        cells[2::4] = np.column_stack([c, d, m])
        cells[3::4] = np.column_stack([d, a, m])

    mesh = Mesh(verts, cells, domain=family.domain)
    _classify(mesh, family.domain)
    return mesh


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: each triangle into four, midpoints on every edge."""
    nv = len(mesh.vertices)
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    verts = np.vstack([mesh.vertices, mids])

    v0, v1, v2 = mesh.cells[:, 0], mesh.cells[:, 1], mesh.cells[:, 2]
    m12 = nv + mesh.cell_edges[:, 0]
    m02 = nv + mesh.cell_edges[:, 1]
    m01 = nv + mesh.cell_edges[:, 2]
    nc = len(mesh.cells)
    cells = np.empty((4 * nc, 3), dtype=np.int64)
    cells[0::4] = np.column_stack([v0, m01, m02])
    cells[1::4] = np.column_stack([v1, m12, m01])
    cells[2::4] = np.column_stack([v2, m02, m12])
    cells[3::4] = np.column_stack([m01, m12, m02])

    vertex_tag = np.concatenate([mesh.vertex_tag, mesh.edge_tag])
    lineage = Lineage(
        cell_parent=np.repeat(np.arange(nc, dtype=np.int64), 4),
        vertex_kind=np.concatenate([np.zeros(nv, dtype=np.uint8),
                                    np.ones(len(mesh.edges), dtype=np.uint8)]),
        vertex_parent=np.concatenate([np.arange(nv, dtype=np.int64),
                                      np.arange(len(mesh.edges), dtype=np.int64)]),
    )

    # periodic identification carries over to child entities
    vmap = {int(s): int(m) for s, m in mesh.vertex_pairs}
    vpairs = [(s, m) for s, m in mesh.vertex_pairs]
    for s_e, m_e in mesh.edge_pairs:
        vpairs.append((nv + int(s_e), nv + int(m_e)))
        vmap[nv + int(s_e)] = nv + int(m_e)

    fine = Mesh(verts, cells, parent=lineage, domain=mesh.domain)

    # child edge tags: halves of parent edges inherit the parent tag
    etag = np.zeros(len(fine.edges), dtype=np.uint8)
    hi = fine.edges[:, 1]
    lo = fine.edges[:, 0]
    is_half = (hi >= nv) & (lo < nv)
    parent_e = hi[is_half] - nv
    touches = (mesh.edges[parent_e, 0] == lo[is_half]) | (mesh.edges[parent_e, 1] == lo[is_half])
    half_rows = np.flatnonzero(is_half)[touches]
    etag[half_rows] = mesh.edge_tag[parent_e[touches]]

    epairs = []
    if vpairs:
        # an edge of the child mesh is identified iff both endpoints are
        lookup = {(int(e0), int(e1)): i for i, (e0, e1) in enumerate(fine.edges)}
        for i, (e0, e1) in enumerate(fine.edges):
            if int(e0) in vmap and int(e1) in vmap:
                key = tuple(sorted((vmap[int(e0)], vmap[int(e1)])))
                j = lookup.get(key)
                if j is not None and j != i:
                    epairs.append((i, j))
                    if not (vmap[int(e0)] < vmap[int(e1)]) == (e0 < e1):
                        raise MeshError("periodic edge orientation flip under refinement")
                    etag[i] = BoundaryTag.INTERIOR
                    etag[j] = BoundaryTag.INTERIOR

    return Mesh(verts, cells, vertex_tag=vertex_tag, edge_tag=etag,
                vertex_pairs=np.array(vpairs, dtype=np.int64).reshape(-1, 2),
                edge_pairs=np.array(epairs, dtype=np.int64).reshape(-1, 2),
                parent=lineage, domain=mesh.domain)


def apply_periodic_x(mesh: Mesh) -> Mesh:
    """Identify the right boundary with the left one by x-translation.

    Requires geometric congruence of the two vertex sets; identified
    vertices and edges are retagged interior.  Idempotent.
    """
    if mesh.domain is None:
        raise MeshError("mesh has no domain box")
    x0, x1, y0, y1 = mesh.domain
    tol = 1e-9 * max(x1 - x0, y1 - y0)
    v = mesh.vertices
    left = np.flatnonzero(np.abs(v[:, 0] - x0) <= tol)
    right = np.flatnonzero(np.abs(v[:, 0] - x1) <= tol)
    if len(left) != len(right):
        raise MeshError("left/right boundary vertex counts differ")
    left = left[np.argsort(v[left, 1], kind="stable")]
    right = right[np.argsort(v[right, 1], kind="stable")]
    if not np.allclose(v[left, 1], v[right, 1], atol=tol, rtol=0.0):
        raise MeshError("left/right boundaries are not congruent in y")

    vmap = dict(zip(right.tolist(), left.tolist()))
    vpairs = np.column_stack([right, left])

    lookup = {(int(a), int(b)): i for i, (a, b) in enumerate(mesh.edges)}
    on_right = np.abs(0.5 * (v[mesh.edges[:, 0], 0] + v[mesh.edges[:, 1], 0]) - x1) <= tol
    epairs = []
    for i in np.flatnonzero(on_right & (mesh.edge_cells[:, 1] < 0)):
        a, b = int(mesh.edges[i, 0]), int(mesh.edges[i, 1])
        ma, mb = vmap[a], vmap[b]
        j = lookup.get((min(ma, mb), max(ma, mb)))
        if j is None:
            raise MeshError("right boundary edge has no left partner")
        if not (ma < mb):
            # canonical orientations of partner edges must point the same way
            raise MeshError("periodic identification flips edge orientation")
        epairs.append((i, j))
    epairs = np.array(epairs, dtype=np.int64).reshape(-1, 2)

    vt = mesh.vertex_tag.copy()
    et = mesh.edge_tag.copy()
    for s, m in vpairs:
        if vt[s] in (BoundaryTag.LEFT, BoundaryTag.RIGHT):
            vt[s] = BoundaryTag.INTERIOR
        if vt[m] in (BoundaryTag.LEFT, BoundaryTag.RIGHT):
            vt[m] = BoundaryTag.INTERIOR
    et[epairs[:, 0]] = BoundaryTag.INTERIOR
    et[epairs[:, 1]] = BoundaryTag.INTERIOR

    return Mesh(mesh.vertices, mesh.cells, vertex_tag=vt, edge_tag=et,
                vertex_pairs=vpairs, edge_pairs=epairs,
                parent=mesh.parent, domain=mesh.domain)
