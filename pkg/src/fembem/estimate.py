"""Weighted-residual error indicators and Doerfler marking.

The volume indicator measures how far the current Riesz update ``w``
is from balancing the interior equation at ``u_prev`` with boundary
flux ``phi0 + phi_j``; the boundary indicator measures the defect of
the integral equation through the arclength derivative of its residual
(the derivative is what controls the H^{1/2} dual norm on each panel).
Both carry the mesh-size weights that make the estimate reliable:
``|T|^{2/d}`` in front of volume L2 terms and ``|T|^{1/d}`` in front of
the edge terms, with d = 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bem
from .fem import TRI_P5, FeFunction, TriangleRule
from .mesh import BoundaryMesh, Mesh

__all__ = [
    "eta_fem",
    "mu_bem",
    "doerfler_mark",
    "EstimatorReport",
    "global_nu",
]


def eta_fem(mesh: Mesh, bmesh: BoundaryMesh, w: FeFunction, u_prev: FeFunction,
            f, phi0, phi_j, operator, rule: TriangleRule = TRI_P5,
            n_gauss: int = 2) -> np.ndarray:
    """Squared volume indicators, one per element.

    eta(T)^2 = |T| * || f - b - c - w ||_{L2(T)}^2
             + |T|^(1/2) * sum_{E in dT \\ Gamma} || [(A grad u_prev + grad w) . n] ||_{L2(E)}^2
             + |T|^(1/2) * sum_{E in dT cap Gamma} || phi0 + phi_j - (A grad u_prev + grad w) . n ||_{L2(E)}^2

    For P1 functions the strong volume residual has no second-order
    part, and normal-flux jumps are constant along each edge.
    """
    area = mesh.areas()
    nq = len(rule.weights)

    pts = rule.points(mesh).reshape(-1, 2)
    dens = f(pts).reshape(mesh.num_triangles, nq)
    if operator.b_lower is not None:
        gq = np.repeat(u_prev.element_gradients(), nq, axis=0)
        dens = dens - operator.b_lower(pts, gq).reshape(dens.shape)
    if operator.c_react is not None:
        uq = u_prev.at_barycentric(rule.barycentric)
        dens = dens - operator.c_react(pts, uq.reshape(-1)).reshape(dens.shape)
    dens = dens - w.at_barycentric(rule.barycentric)
    eta2 = area ** 2 * np.einsum("q,tq->t", rule.weights, dens ** 2)

    # total discrete flux, constant per element
    centroids = mesh.corners().mean(axis=1)
    sigma = operator.a_flux(centroids, u_prev.element_gradients()) + w.element_gradients()

    edges, tri2edge, edge2tri = mesh.edge_structure()
    evec = mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]]
    elen = np.hypot(evec[:, 0], evec[:, 1])
    enormal = np.stack([evec[:, 1], -evec[:, 0]], axis=1) / elen[:, None]
    interior = edge2tri[:, 1] >= 0
    jump = np.einsum("ed,ed->e",
                     sigma[edge2tri[interior, 0]] - sigma[edge2tri[interior, 1]],
                     enormal[interior])
    base = elen[interior] * jump ** 2                  # int_E [..]^2 ds
    sqrt_area = np.sqrt(area)
    idx = np.flatnonzero(interior)
    contrib = np.zeros(len(edges))
    contrib[idx] = base
    per_tri_edges = contrib[tri2edge].sum(axis=1)      # boundary edges add zero
    eta2 = eta2 + sqrt_area * per_tri_edges

    # boundary edges: flux mismatch against the given interface data
    pts_b, wts_b = bmesh.gauss_points(n_gauss)
    nrm = np.repeat(bmesh.normals()[:, None, :], n_gauss, axis=1)
    rho = phi0(pts_b.reshape(-1, 2), nrm.reshape(-1, 2)).reshape(bmesh.num_segments, n_gauss)
    rho = rho + np.asarray(phi_j, float)[:, None]
    rho = rho - np.einsum("sd,sqd->sq", sigma[bmesh.owner],
                          np.repeat(bmesh.normals()[:, None, :], n_gauss, axis=1))
    per_seg = np.einsum("sq,sq->s", wts_b, rho ** 2)
    np.add.at(eta2, bmesh.owner, sqrt_area[bmesh.owner] * per_seg)
    return eta2


def mu_bem(bmesh: BoundaryMesh, psi, g, du0_ds=None, n_gauss: int = 4) -> np.ndarray:
    """Squared boundary indicators, one per segment.

    mu(E)^2 = |E| * || d/ds [ (K - 1/2) g - V psi ] ||_{L2(E)}^2
            + |E| * || (1 - Pi) du0/ds ||_{L2(E)}^2

    where Pi is the panel-mean projection; the second term is the data
    oscillation of the interface jump and is skipped when ``du0_ds`` is
    None.
    """
    vals, pts, wts = bem.eval_residual_derivative(bmesh, psi, g, n_gauss=n_gauss)
    lengths = bmesh.lengths()
    mu2 = lengths * np.einsum("sq,sq->s", wts, vals ** 2)
    if du0_ds is not None:
        tau = np.repeat(bmesh.tangents()[:, None, :], n_gauss, axis=1)
        d = du0_ds(pts.reshape(-1, 2), tau.reshape(-1, 2)).reshape(bmesh.num_segments, n_gauss)
        mean = np.einsum("sq,sq->s", wts, d) / lengths
        osc = np.einsum("sq,sq->s", wts, (d - mean[:, None]) ** 2)
        mu2 = mu2 + lengths * osc
    return mu2


def doerfler_mark(indicators: np.ndarray, theta: float) -> np.ndarray:
    """Minimal set of largest indicators whose sum reaches ``theta`` of the total.

    Greedy: sort descending (ties resolved by index, so marking is
    deterministic), cut as soon as the partial sum reaches the target;
    a tiny relative slack guards against the partial sums never hitting
    an exact floating-point target.  Returns ascending indices.
    """
    ind = np.asarray(indicators, dtype=float)
    if np.any(ind < 0.0):
        raise ValueError("indicators must be non-negative")
    total = ind.sum()
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must be in (0, 1]")
    if total <= 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-ind, kind="stable")
    csum = np.cumsum(ind[order])
    target = theta * total * (1.0 - 1e-12)
    m = int(np.searchsorted(csum, target, side="left")) + 1
    return np.sort(order[:m])


@dataclass(frozen=True)
class EstimatorReport:
    """Per-entity squared indicators with their global roots."""

    eta_sq: np.ndarray   # (num_triangles,)
    mu_sq: np.ndarray    # (num_segments,)

    @property
    def eta(self) -> float:
        return float(np.sqrt(self.eta_sq.sum()))

    @property
    def mu(self) -> float:
        return float(np.sqrt(self.mu_sq.sum()))


def global_nu(report: EstimatorReport, w_norm: float,
              fem_algebraic: float, bem_algebraic: float) -> float:
    """Total computable error bound of the current outer iterate.

    Sum of the two estimators, the H1 norm of the latest update (the
    outer perturbation), and the two algebraic solver residuals.
    """
    return report.eta + report.mu + w_norm + fem_algebraic + bem_algebraic
