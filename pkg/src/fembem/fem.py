"""Lowest-order FEM pieces: Riesz matrix, load functionals, errors.

The inner product behind all energy computations is the full H^1 inner
product ``(grad u, grad v) + (u, v)``; its Galerkin matrix (the "Riesz
matrix") is assembled exactly for P1 elements.  Volume functionals use
a 7-point degree-5 triangle rule, boundary functionals 4-point
Gauss-Legendre per segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .mesh import BoundaryMesh, Mesh, RefinementRelation

__all__ = [
    "FeFunction",
    "TriangleRule",
    "TRI_P5",
    "TRI_P8",
    "assemble_riesz",
    "assemble_stiffness",
    "riesz_diagonal",
    "volume_load",
    "boundary_load",
    "assemble_w_rhs",
    "prolongate",
    "h1_error",
    "h1_norm",
]


@dataclass(frozen=True)
class FeFunction:
    """Continuous P1 function given by vertex values."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.num_vertices,):
            raise ValueError("coefficient vector does not match the mesh")
        object.__setattr__(self, "values", v)

    def element_gradients(self) -> np.ndarray:
        """(nt, 2) constant gradient per element."""
        g = _hat_gradients(self.mesh)                     # (nt, 3, 2)
        return np.einsum("tk,tkd->td", self.values[self.mesh.triangles], g)

    def at_barycentric(self, lam: np.ndarray) -> np.ndarray:
        """Values at barycentric points, shape (nt, nq)."""
        return self.values[self.mesh.triangles] @ lam.T


@dataclass(frozen=True)
class TriangleRule:
    """Quadrature rule in barycentric coordinates; weights sum to one."""

    barycentric: np.ndarray   # (nq, 3)
    weights: np.ndarray       # (nq,)

    def points(self, mesh: Mesh) -> np.ndarray:
        """Physical quadrature points, shape (nt, nq, 2)."""
        return np.einsum("qk,tkd->tqd", self.barycentric, mesh.corners())


def _sym3(a, w):
    return [(a, a, 1 - 2 * a), (a, 1 - 2 * a, a), (1 - 2 * a, a, a)], [w] * 3


def _perm6(a, b, w):
    c = 1 - a - b
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)], [w] * 6


def _make_tri_p5() -> TriangleRule:
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    wts = [9 / 40]
    p, w = _sym3(0.470142064105115, 0.132394152788506)
    pts += p
    wts += w
    p, w = _sym3(0.101286507323456, 0.125939180544827)
    pts += p
    wts += w
    return TriangleRule(np.array(pts), np.array(wts))


def _make_tri_p8() -> TriangleRule:
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    wts = [0.1443156076777871]
    for a, w in [
        (0.4592925882927231, 0.0950916342672846),
        (0.1705693077517602, 0.1032173705347182),
        (0.0505472283170310, 0.0324584976231980),
    ]:
        p, ww = _sym3(a, w)
        pts += p
        wts += ww
    p, ww = _perm6(0.2631128296346381, 0.0083947774099576, 0.0272303141744349)
    pts += p
    wts += ww
    return TriangleRule(np.array(pts), np.array(wts))


TRI_P5 = _make_tri_p5()
TRI_P8 = _make_tri_p8()


def _hat_gradients(mesh: Mesh) -> np.ndarray:
    """Gradients of the three barycentric hats per element, (nt, 3, 2)."""
    p = mesh.corners()
    area2 = 2.0 * mesh.areas()
    if np.any(area2 <= 0):
        raise ValueError("degenerate element in gradient computation")
    g = np.empty((mesh.num_triangles, 3, 2))
    for k in range(3):
        e = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]   # edge opposite vertex k
        g[:, k, 0] = -e[:, 1] / area2
        g[:, k, 1] = e[:, 0] / area2
    return g


def assemble_stiffness(mesh: Mesh) -> csr_matrix:
    """Exact P1 stiffness matrix (grad-grad part only)."""
    g = _hat_gradients(mesh)
    area = mesh.areas()
    loc = np.einsum("tid,tjd->tij", g, g) * area[:, None, None]
    return _scatter(mesh, loc)


def assemble_riesz(mesh: Mesh) -> csr_matrix:
    """Galerkin matrix of the H^1 inner product (stiffness + mass)."""
    g = _hat_gradients(mesh)
    area = mesh.areas()
    loc = np.einsum("tid,tjd->tij", g, g) * area[:, None, None]
    mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    loc = loc + mass[None, :, :] * area[:, None, None]
    return _scatter(mesh, loc)


def _scatter(mesh: Mesh, loc: np.ndarray) -> csr_matrix:
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).reshape(-1)
    cols = np.tile(t, (1, 3)).reshape(-1)
    n = mesh.num_vertices
    return coo_matrix((loc.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()


def riesz_diagonal(mesh: Mesh) -> np.ndarray:
    """Diagonal of the Riesz matrix without assembling it."""
    g = _hat_gradients(mesh)
    area = mesh.areas()
    contrib = (np.einsum("tkd,tkd->tk", g, g) + 1.0 / 6.0) * area[:, None]
    diag = np.zeros(mesh.num_vertices)
    np.add.at(diag, mesh.triangles.reshape(-1), contrib.reshape(-1))
    return diag


def volume_load(mesh: Mesh, f, rule: TriangleRule = TRI_P5) -> np.ndarray:
    """Vector of ``(f, hat_i)`` via triangle quadrature."""
    pts = rule.points(mesh)
    fv = f(pts.reshape(-1, 2)).reshape(mesh.num_triangles, -1)
    area = mesh.areas()
    contrib = np.einsum("q,tq,qk->tk", rule.weights, fv, rule.barycentric) * area[:, None]
    out = np.zeros(mesh.num_vertices)
    np.add.at(out, mesh.triangles.reshape(-1), contrib.reshape(-1))
    return out


def boundary_load(bmesh: BoundaryMesh, values: np.ndarray, n_gauss: int = 4) -> np.ndarray:
    """Vector of ``(phi, hat_i)_Gamma`` from values at Gauss nodes.

    ``values`` has shape (ns, n_gauss) holding the integrand at the
    nodes of :meth:`BoundaryMesh.gauss_points` with the same order.
    """
    pts, wts = bmesh.gauss_points(n_gauss)
    xi, _ = np.polynomial.legendre.leggauss(n_gauss)
    lam = 0.5 * (xi + 1.0)           # position of each node along the segment
    out = np.zeros(bmesh.mesh.num_vertices)
    c0 = np.einsum("sq,q,sq->s", wts, 1.0 - lam, np.asarray(values))
    c1 = np.einsum("sq,q,sq->s", wts, lam, np.asarray(values))
    np.add.at(out, bmesh.segments[:, 0], c0)
    np.add.at(out, bmesh.segments[:, 1], c1)
    return out


def assemble_w_rhs(mesh: Mesh, bmesh: BoundaryMesh, f, phi0, phi_j, u_prev: FeFunction,
                   operator, rule: TriangleRule = TRI_P5, n_gauss: int = 4) -> np.ndarray:
    """Right-hand side of the Riesz update problem.

    Functional ``v -> (f, v) + (phi0 + phi_j, v)_Gamma - a(u_prev; v)``
    where ``a`` applies the (possibly nonlinear) interior operator.
    ``phi_j`` is a piecewise-constant boundary density given by one value
    per segment of ``bmesh``; ``phi0`` is a callback ``(points, normals)``.
    """
    from .model import apply_interior_operator

    if u_prev.mesh is not mesh and u_prev.mesh.num_vertices != mesh.num_vertices:
        raise ValueError("u_prev does not live on the given mesh")
    phi_j = np.asarray(phi_j, dtype=float)
    if phi_j.shape != (bmesh.num_segments,):
        raise ValueError("phi_j must hold one value per boundary segment")
    rhs = volume_load(mesh, f, rule)
    pts, _ = bmesh.gauss_points(n_gauss)
    nrm = np.repeat(bmesh.normals()[:, None, :], n_gauss, axis=1)
    vals = phi0(pts.reshape(-1, 2), nrm.reshape(-1, 2)).reshape(bmesh.num_segments, n_gauss)
    vals = vals + phi_j[:, None]
    rhs += boundary_load(bmesh, vals, n_gauss)
    rhs -= apply_interior_operator(operator, u_prev, rule=rule)
    return rhs


def prolongate(u: FeFunction, relation: RefinementRelation) -> FeFunction:
    """Interpolate a P1 function onto the refined mesh (exact embedding)."""
    if u.mesh.num_vertices != relation.coarse.num_vertices:
        raise ValueError("function does not live on the coarse mesh of the relation")
    old = u.values
    parents = relation.new_vertex_parents
    new = 0.5 * (old[parents[:, 0]] + old[parents[:, 1]]) if len(parents) else np.zeros(0)
    return FeFunction(relation.fine, np.concatenate([old, new]))


def h1_error(u_h: FeFunction, u_exact, grad_exact, rule: TriangleRule = TRI_P5) -> float:
    """Full H^1 norm of ``u_exact - u_h`` by element quadrature."""
    mesh = u_h.mesh
    pts = rule.points(mesh)
    flat = pts.reshape(-1, 2)
    du = u_exact(flat).reshape(mesh.num_triangles, -1) - u_h.at_barycentric(rule.barycentric)
    dg = grad_exact(flat).reshape(mesh.num_triangles, -1, 2) - u_h.element_gradients()[:, None, :]
    dens = du ** 2 + np.einsum("tqd,tqd->tq", dg, dg)
    total = np.einsum("t,q,tq->", mesh.areas(), rule.weights, dens)
    return float(np.sqrt(total))


def h1_norm(u: FeFunction) -> float:
    """Full H^1 norm (exact for P1, via the Riesz matrix)."""
    S = assemble_riesz(u.mesh)
    return float(np.sqrt(u.values @ (S @ u.values)))
