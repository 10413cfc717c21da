"""Conforming triangulations with newest-vertex-bisection refinement.

Triangles are stored counterclockwise with the convention that the
*reference edge* of element ``(v0, v1, v2)`` is the edge ``v0--v1``
(the newest vertex is ``v2``).  Bisection inserts the midpoint of the
reference edge; the two sons inherit the old non-reference edges as
their reference edges.  Meshes are immutable; refinement returns a new
mesh together with a :class:`RefinementRelation` describing fathers,
sons and the new midpoint vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "BoundaryMesh",
    "RefinementRelation",
    "make_initial_mesh",
    "refine_nvb",
    "boundary_trace",
    "shape_regularity",
    "write_mesh",
    "read_mesh",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation of a polygonal domain.

    vertices    -- (nv, 2) float coordinates
    triangles   -- (nt, 3) int vertex ids, counterclockwise, reference
                   edge between the first two vertices
    generation  -- (nt,) bisection generation of each element
    father      -- (nt,) element id in the previous mesh (-1 for roots)
    """

    vertices: np.ndarray
    triangles: np.ndarray
    generation: np.ndarray = None
    father: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(np.asarray(self.vertices, dtype=float)))
        object.__setattr__(self, "triangles", _frozen(np.asarray(self.triangles, dtype=np.int64)))
        nt = len(self.triangles)
        gen = np.zeros(nt, dtype=np.int64) if self.generation is None else np.asarray(self.generation, dtype=np.int64)
        fat = np.full(nt, -1, dtype=np.int64) if self.father is None else np.asarray(self.father, dtype=np.int64)
        object.__setattr__(self, "generation", _frozen(gen))
        object.__setattr__(self, "father", _frozen(fat))

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """Vertex coordinates per element, shape (nt, 3, 2)."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        p = self.corners()
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def diameters(self) -> np.ndarray:
        p = self.corners()
        d01 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        d12 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
        d20 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
        return np.max(np.stack([d01, d12, d20], axis=1), axis=1)

    def edge_structure(self):
        """Unique (undirected) edges and the triangle->edge incidence.

        Returns (edges, tri2edge, edge2tri) where ``edges`` is (ne, 2)
        with sorted vertex pairs, ``tri2edge`` is (nt, 3) with local edge
        k = (t[k], t[(k+1)%3]), and ``edge2tri`` is (ne, 2) holding the
        adjacent element ids (-1 on the second slot for boundary edges).
        """
        t = self.triangles
        raw = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        und = np.sort(raw, axis=1)
        edges, tri2edge = np.unique(und, axis=0, return_inverse=True)
        tri2edge = tri2edge.reshape(-1, 3)
        ne = len(edges)
        edge2tri = np.full((ne, 2), -1, dtype=np.int64)
        tri_ids = np.repeat(np.arange(self.num_triangles), 3)
        flat = tri2edge.reshape(-1)
        order = np.argsort(flat, kind="stable")
        flat_sorted = flat[order]
        tri_sorted = tri_ids[order]
        first = np.searchsorted(flat_sorted, np.arange(ne), side="left")
        last = np.searchsorted(flat_sorted, np.arange(ne), side="right")
        counts = last - first
        if np.any(counts > 2):
            raise ValueError("non-conforming mesh: edge shared by more than two elements")
        edge2tri[:, 0] = tri_sorted[first]
        has2 = counts == 2
        edge2tri[has2, 1] = tri_sorted[last[has2] - 1]
        return edges, tri2edge, edge2tri

    def validate(self) -> None:
        """Cheap structural checks used by the test-suite."""
        if np.any(self.areas() <= 0):
            raise ValueError("degenerate or clockwise element")
        edges, tri2edge, edge2tri = self.edge_structure()
        # every interior edge must appear once in each orientation
        t = self.triangles
        raw = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        directed = set(map(tuple, raw.tolist()))
        if len(directed) != len(raw):
            raise ValueError("duplicated directed edge")
        interior = edge2tri[:, 1] >= 0
        for a, b in edges[interior]:
            if (a, b) not in directed or (b, a) not in directed:
                raise ValueError("inconsistent orientation across an interior edge")


@dataclass(frozen=True)
class BoundaryMesh:
    """Trace of a volume mesh on the boundary polygon.

    Segments run counterclockwise (domain on the left); segment k joins
    boundary_vertices[k] to boundary_vertices[(k+1) % n].  ``normals``
    point out of the domain.
    """

    mesh: Mesh
    segments: np.ndarray        # (ns, 2) global vertex ids, ordered along the walk
    owner: np.ndarray           # (ns,) element id owning each segment
    owner_edge: np.ndarray      # (ns,) local edge index in the owner
    boundary_vertices: np.ndarray  # (ns,) global vertex ids along the walk

    def __post_init__(self):
        for name in ("segments", "owner", "owner_edge", "boundary_vertices"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    def endpoints(self):
        p = self.mesh.vertices
        return p[self.segments[:, 0]], p[self.segments[:, 1]]

    def lengths(self) -> np.ndarray:
        a, b = self.endpoints()
        return np.linalg.norm(b - a, axis=1)

    def tangents(self) -> np.ndarray:
        a, b = self.endpoints()
        t = b - a
        return t / np.linalg.norm(t, axis=1)[:, None]

    def normals(self) -> np.ndarray:
        t = self.tangents()
        return np.stack([t[:, 1], -t[:, 0]], axis=1)

    def gauss_points(self, n: int):
        """Gauss-Legendre nodes and weights on every segment.

        Returns (points, weights) of shapes (ns, n, 2) and (ns, n); the
        weights of one segment sum to its length.
        """
        xi, w = np.polynomial.legendre.leggauss(n)
        a, b = self.endpoints()
        lam = 0.5 * (xi + 1.0)
        pts = a[:, None, :] + lam[None, :, None] * (b - a)[:, None, :]
        wts = 0.5 * w[None, :] * self.lengths()[:, None]
        return pts, wts


@dataclass(frozen=True)
class RefinementRelation:
    """Bookkeeping linking a mesh to its refinement."""

    coarse: Mesh
    fine: Mesh
    tri_sons: tuple            # tuple of int arrays, sons of each coarse element
    new_vertex_parents: np.ndarray  # (n_new, 2) endpoints of each bisected edge
    seg_sons: tuple = ()       # sons of each coarse boundary segment
    seg_father: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def vertex_prolongation_matrix(self):
        """Sparse (nv_fine, nv_coarse) interpolation of P1 functions."""
        from scipy.sparse import csr_matrix

        nvc = self.coarse.num_vertices
        nvf = self.fine.num_vertices
        n_new = nvf - nvc
        rows = np.concatenate([np.arange(nvc), np.repeat(np.arange(nvc, nvf), 2)])
        cols = np.concatenate([np.arange(nvc), self.new_vertex_parents.reshape(-1)])
        vals = np.concatenate([np.ones(nvc), np.full(2 * n_new, 0.5)])
        return csr_matrix((vals, (rows, cols)), shape=(nvf, nvc))


# ----------------------------------------------------------------------------
# initial meshes


def _normalize_reference_edges(vertices, triangles, refedge):
    """Rotate each connectivity row so the reference edge is (v0, v1)."""
    t = np.asarray(triangles, dtype=np.int64).copy()
    for i, k in enumerate(refedge):
        t[i] = np.roll(t[i], -k)
    return t


def _longest_edge_refedge(vertices, triangles):
    p = np.asarray(vertices, float)[np.asarray(triangles, int)]
    l0 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    l1 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    l2 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    return np.argmax(np.stack([l0, l1, l2], axis=1), axis=1)


def make_initial_mesh(domain: str) -> Mesh:
    """Coarse triangulation of the L-shaped or Z-shaped domain.

    Both domains live inside the square (-1/4, 1/4)^2 so that the
    diameter stays below one (required for the ellipticity of the
    single-layer operator of the 2D log kernel).  The L-shape removes
    the closed fourth-quadrant square, leaving a reentrant angle of
    3*pi/2 at the origin; the Z-shape removes only the wedge between
    the positive x-axis and the ray at -pi/4, leaving an angle of
    7*pi/4.  Each quarter square is split into four elements via its
    center; the reference edges are the longest edges.
    """
    h = 0.25
    if domain == "lshape":
        vertices = np.array([
            (0.0, 0.0), (h, 0.0), (h, h), (0.0, h), (-h, h),
            (-h, 0.0), (-h, -h), (0.0, -h),
            (h / 2, h / 2), (-h / 2, h / 2), (-h / 2, -h / 2),
        ])
        triangles = [
            (0, 1, 8), (1, 2, 8), (2, 3, 8), (3, 0, 8),
            (0, 3, 9), (3, 4, 9), (4, 5, 9), (5, 0, 9),
            (5, 6, 10), (6, 7, 10), (7, 0, 10), (0, 5, 10),
        ]
    elif domain == "zshape":
        vertices = np.array([
            (0.0, 0.0), (h, 0.0), (h, h), (0.0, h), (-h, h),
            (-h, 0.0), (-h, -h), (0.0, -h),
            (h / 2, h / 2), (-h / 2, h / 2), (-h / 2, -h / 2),
            (h, -h), (h / 2, -h / 2),
        ])
        triangles = [
            (0, 1, 8), (1, 2, 8), (2, 3, 8), (3, 0, 8),
            (0, 3, 9), (3, 4, 9), (4, 5, 9), (5, 0, 9),
            (5, 6, 10), (6, 7, 10), (7, 0, 10), (0, 5, 10),
            (0, 7, 12), (7, 11, 12),
        ]
    else:
        raise ValueError(f"unknown domain {domain!r}; expected 'lshape' or 'zshape'")
    refedge = _longest_edge_refedge(vertices, triangles)
    tris = _normalize_reference_edges(vertices, triangles, refedge)
    return Mesh(vertices, tris)


# ----------------------------------------------------------------------------
# boundary trace


def boundary_trace(mesh: Mesh) -> BoundaryMesh:
    """Extract the boundary polygon as an ordered counterclockwise walk."""
    t = mesh.triangles
    edges, tri2edge, edge2tri = mesh.edge_structure()
    bnd = np.flatnonzero(edge2tri[:, 1] < 0)
    if len(bnd) == 0:
        raise ValueError("mesh has no boundary")
    # recover the directed version of each boundary edge (CCW elements
    # traverse their edges with the domain on the left)
    owner = edge2tri[bnd, 0]
    local = np.argmax(tri2edge[owner] == bnd[:, None], axis=1)
    start = t[owner, local]
    end = t[owner, (local + 1) % 3]
    # order into a closed walk, starting at the smallest vertex id
    nxt = {int(a): i for i, a in enumerate(start)}
    walk = []
    v = int(start.min())
    for _ in range(len(bnd)):
        i = nxt[v]
        walk.append(i)
        v = int(end[i])
    if v != int(start.min()):
        raise ValueError("boundary is not a single closed curve")
    walk = np.asarray(walk)
    segments = np.stack([start[walk], end[walk]], axis=1)
    return BoundaryMesh(
        mesh=mesh,
        segments=segments,
        owner=owner[walk],
        owner_edge=local[walk],
        boundary_vertices=start[walk],
    )


def shape_regularity(mesh: Mesh) -> float:
    """max_T diam(T) / |T|^(1/2)."""
    return float(np.max(mesh.diameters() / np.sqrt(mesh.areas())))


# ----------------------------------------------------------------------------
# newest vertex bisection


def refine_nvb(mesh: Mesh, marked, marked_segments=(), bmesh: BoundaryMesh = None):
    """Refine by newest vertex bisection with conforming closure.

    ``marked`` holds element ids whose reference edge must be bisected;
    ``marked_segments`` optionally names boundary segments (indices into
    ``boundary_trace(mesh)``) that must be split as well -- used when the
    marking is driven by boundary indicators.  The closure iterates
    "any element with a marked edge gets its reference edge marked"
    to a fixpoint, then every element is split according to its marked
    edges (1, 2 or 3 bisections into 2, 3 or 4 sons).  Marked elements
    never survive; son areas are exactly 1/2 or 1/4 of the father's.

    Returns ``(fine_mesh, relation)``.
    """
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=np.int64)
    if len(marked) and (marked.min() < 0 or marked.max() >= mesh.num_triangles):
        raise ValueError("marked element id out of range")
    edges, tri2edge, edge2tri = mesh.edge_structure()
    ne = len(edges)
    edge_marked = np.zeros(ne, dtype=bool)
    if len(marked):
        edge_marked[tri2edge[marked, 0]] = True
    seg_ids = np.asarray(sorted(set(int(s) for s in marked_segments)), dtype=np.int64)
    if len(seg_ids):
        if bmesh is None:
            bmesh = boundary_trace(mesh)
        edge_marked[tri2edge[bmesh.owner[seg_ids], bmesh.owner_edge[seg_ids]]] = True

    # closure: the reference edge of any element with a marked edge is marked
    while True:
        need = edge_marked[tri2edge].any(axis=1) & ~edge_marked[tri2edge[:, 0]]
        if not need.any():
            break
        edge_marked[tri2edge[need, 0]] = True

    n_new = int(edge_marked.sum())
    new_vertex_of_edge = np.full(ne, -1, dtype=np.int64)
    hit = np.flatnonzero(edge_marked)
    new_vertex_of_edge[hit] = mesh.num_vertices + np.arange(n_new)
    midpoints = 0.5 * (mesh.vertices[edges[hit, 0]] + mesh.vertices[edges[hit, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])

    em = edge_marked[tri2edge]          # (nt, 3) which local edges split
    pattern = em[:, 0].astype(int) + 2 * em[:, 1].astype(int) + 4 * em[:, 2].astype(int)
    # closure guarantees: if any edge is marked then edge 0 is marked
    n_sons = np.choose(pattern, [1, 2, 0, 3, 0, 3, 0, 4])
    if np.any(n_sons == 0):
        raise AssertionError("closure failed to mark a reference edge")
    offset = np.concatenate([[0], np.cumsum(n_sons)])
    nt_new = int(offset[-1])
    tris = np.empty((nt_new, 3), dtype=np.int64)
    gen = np.empty(nt_new, dtype=np.int64)
    father = np.empty(nt_new, dtype=np.int64)

    t = mesh.triangles
    m0 = new_vertex_of_edge[tri2edge[:, 0]]
    m1 = new_vertex_of_edge[tri2edge[:, 1]]
    m2 = new_vertex_of_edge[tri2edge[:, 2]]
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    g = mesh.generation

    def put(rows, cols_abc, gens):
        tris[rows] = np.stack(cols_abc, axis=1)
        gen[rows] = gens

    sel = np.flatnonzero(pattern == 0)
    if len(sel):
        put(offset[sel], (a[sel], b[sel], c[sel]), g[sel])
    sel = np.flatnonzero(pattern == 1)          # bisec1
    if len(sel):
        put(offset[sel], (c[sel], a[sel], m0[sel]), g[sel] + 1)
        put(offset[sel] + 1, (b[sel], c[sel], m0[sel]), g[sel] + 1)
    sel = np.flatnonzero(pattern == 3)          # edges 0 and 1
    if len(sel):
        put(offset[sel], (c[sel], a[sel], m0[sel]), g[sel] + 1)
        put(offset[sel] + 1, (m0[sel], b[sel], m1[sel]), g[sel] + 2)
        put(offset[sel] + 2, (c[sel], m0[sel], m1[sel]), g[sel] + 2)
    sel = np.flatnonzero(pattern == 5)          # edges 0 and 2
    if len(sel):
        put(offset[sel], (m0[sel], c[sel], m2[sel]), g[sel] + 2)
        put(offset[sel] + 1, (a[sel], m0[sel], m2[sel]), g[sel] + 2)
        put(offset[sel] + 2, (b[sel], c[sel], m0[sel]), g[sel] + 1)
    sel = np.flatnonzero(pattern == 7)          # all three edges
    if len(sel):
        put(offset[sel], (m0[sel], c[sel], m2[sel]), g[sel] + 2)
        put(offset[sel] + 1, (a[sel], m0[sel], m2[sel]), g[sel] + 2)
        put(offset[sel] + 2, (m0[sel], b[sel], m1[sel]), g[sel] + 2)
        put(offset[sel] + 3, (c[sel], m0[sel], m1[sel]), g[sel] + 2)

    for i in range(mesh.num_triangles):
        father[offset[i]:offset[i + 1]] = i
    fine = Mesh(vertices, tris, gen, father)
    tri_sons = tuple(np.arange(offset[i], offset[i + 1]) for i in range(mesh.num_triangles))

    # boundary segment genealogy
    if bmesh is None:
        bmesh = boundary_trace(mesh)
    fine_trace = boundary_trace(fine)
    lookup = {(int(p), int(q)): k for k, (p, q) in enumerate(fine_trace.segments)}
    seg_sons = []
    seg_father = np.empty(fine_trace.num_segments, dtype=np.int64)
    for k in range(bmesh.num_segments):
        v0, v1 = map(int, bmesh.segments[k])
        e = tri2edge[bmesh.owner[k], bmesh.owner_edge[k]]
        if edge_marked[e]:
            m = int(new_vertex_of_edge[e])
            sons = np.array([lookup[(v0, m)], lookup[(m, v1)]], dtype=np.int64)
        else:
            sons = np.array([lookup[(v0, v1)]], dtype=np.int64)
        seg_sons.append(sons)
        seg_father[sons] = k

    relation = RefinementRelation(
        coarse=mesh,
        fine=fine,
        tri_sons=tri_sons,
        new_vertex_parents=edges[hit],
        seg_sons=tuple(seg_sons),
        seg_father=seg_father,
    )
    return fine, relation


# ----------------------------------------------------------------------------
# plain-text dumps


def write_mesh(mesh: Mesh, path) -> None:
    """Dump a mesh as plain text (vertex lines, then connectivity lines).

    Format: first line ``nv nt``, followed by ``nv`` lines ``x y`` and
    ``nt`` lines ``v0 v1 v2 refedge``.  The reference edge index is
    always 0 under the storage normalization.
    """
    with open(path, "w") as fh:
        fh.write(f"{mesh.num_vertices} {mesh.num_triangles}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for v0, v1, v2 in mesh.triangles:
            fh.write(f"{v0} {v1} {v2} 0\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        nv, nt = map(int, fh.readline().split())
        vertices = np.array([[float(v) for v in fh.readline().split()] for _ in range(nv)])
        rows = [fh.readline().split() for _ in range(nt)]
    tris = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in rows], dtype=np.int64)
    ref = np.array([int(r[3]) for r in rows])
    tris = _normalize_reference_edges(vertices, tris, ref)
    return Mesh(vertices, tris)
