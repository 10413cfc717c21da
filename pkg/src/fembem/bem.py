"""Boundary-element pieces for the 2D Laplace kernel.

Fundamental solution ``G(z) = -log|z| / (2*pi)`` (which is why the
domains are scaled to diameter < 1: the single-layer operator is then
elliptic).  Densities are piecewise constant per boundary segment,
traces piecewise affine in the boundary vertices.

Quadrature strategy for the single-layer Galerkin matrix: the inner
integral ``int_E' log|x-y| ds(y)`` is evaluated in closed form, the
outer one by Gauss-Legendre.  Pairs of panels on one straight line
(including every panel with itself) have a fully closed-form double
integral; panels meeting at a corner get the ``s log s`` endpoint
behaviour of the outer integrand subtracted analytically and the
remainder integrated on a geometrically graded composite Gauss rule.
Double-layer integrals of affine densities and the tangential
derivatives of both potentials are closed-form per panel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import BoundaryMesh, RefinementRelation

__all__ = [
    "BemDensity",
    "BoundaryTrace",
    "trace_of",
    "nodal_interpolate_u0",
    "assemble_single_layer",
    "assemble_dl_rhs",
    "integrate_double_layer",
    "integrate_trace",
    "double_layer_pointwise",
    "single_layer_pointwise",
    "eval_residual_derivative",
    "hminushalf_error_surrogate",
    "prolongate_density",
]

TWO_PI = 2.0 * np.pi
_LINE_TOL = 1e-9


@dataclass(frozen=True)
class BemDensity:
    """Piecewise-constant density, one value per boundary segment."""

    bmesh: BoundaryMesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.bmesh.num_segments,):
            raise ValueError("density values do not match the boundary mesh")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class BoundaryTrace:
    """Piecewise-affine function on the boundary walk.

    ``values[k]`` belongs to ``bmesh.boundary_vertices[k]``; on segment
    k the function interpolates ``values[k] -> values[(k+1) % ns]``.
    """

    bmesh: BoundaryMesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.bmesh.num_segments,):
            raise ValueError("trace values do not match the boundary vertices")
        object.__setattr__(self, "values", v)

    def endpoint_values(self):
        g0 = self.values
        g1 = np.roll(self.values, -1)
        return g0, g1

    def slopes(self):
        """Arclength derivative per segment."""
        g0, g1 = self.endpoint_values()
        return (g1 - g0) / self.bmesh.lengths()


def trace_of(u, bmesh: BoundaryMesh) -> BoundaryTrace:
    """Boundary trace of a P1 volume function."""
    return BoundaryTrace(bmesh, np.asarray(u.values)[bmesh.boundary_vertices])


def nodal_interpolate_u0(bmesh: BoundaryMesh, u0) -> BoundaryTrace:
    """Nodal interpolant of transmission data in the boundary vertices."""
    pts = bmesh.mesh.vertices[bmesh.boundary_vertices]
    return BoundaryTrace(bmesh, u0(pts))


def prolongate_density(psi: BemDensity, relation: RefinementRelation,
                       bmesh_fine: BoundaryMesh | None = None) -> BemDensity:
    """Carry a piecewise-constant density to the refined trace (exact)."""
    if psi.bmesh.num_segments != len(relation.seg_sons):
        raise ValueError("density does not live on the coarse trace of the relation")
    if bmesh_fine is None:
        from .mesh import boundary_trace

        bmesh_fine = boundary_trace(relation.fine)
    return BemDensity(bmesh_fine, psi.values[relation.seg_father])


# ----------------------------------------------------------------------------
# panel geometry helpers


def _frames(bmesh: BoundaryMesh):
    a, b = bmesh.endpoints()
    L = bmesh.lengths()
    d = (b - a) / L[:, None]
    n = np.stack([d[:, 1], -d[:, 0]], axis=1)
    return a, d, n, L


def _panel_coords(points, p0, d, n):
    """Projection coordinates of evaluation points w.r.t. every panel.

    Returns (s0, H): tangential coordinate along the panel direction and
    signed distance to the panel line, each of shape (m, ns).
    """
    v = np.asarray(points, float)[:, None, :] - p0[None, :, :]
    s0 = np.einsum("mpd,pd->mp", v, d)
    H = np.einsum("mpd,pd->mp", v, n)
    return s0, H


def _safe_log(q):
    return np.log(np.where(q > 0.0, q, 1.0))


def _atan_span(h, L, a, b):
    """atan(b/h) - atan(a/h) for h >= 0, stable for all magnitudes."""
    return np.arctan2(h * L, h * h + a * b)


def _log_inner(points, p0, d, n, L):
    """Closed-form ``int_panel log|x-y| ds(y)`` for all (point, panel) pairs."""
    s0, H = _panel_coords(points, p0, d, n)
    h = np.abs(H)
    a = -s0
    b = L[None, :] - s0
    qa = a * a + h * h
    qb = b * b + h * h
    val = 0.5 * (b * _safe_log(qb) - a * _safe_log(qa)) - L[None, :] \
        + h * _atan_span(h, L[None, :], a, b)
    return val


def _blocks(m: int, ns: int, budget: int = 1_000_000):
    """Row-block ranges keeping (rows x ns) temporaries below ``budget``."""
    step = max(1, budget // max(ns, 1))
    for i0 in range(0, m, step):
        yield i0, min(i0 + step, m)


def single_layer_pointwise(bmesh: BoundaryMesh, psi, points) -> np.ndarray:
    """Single-layer potential of a P0 density at arbitrary points."""
    psi_v = psi.values if isinstance(psi, BemDensity) else np.asarray(psi, float)
    p0, d, n, L = _frames(bmesh)
    x = np.atleast_2d(np.asarray(points, float))
    out = np.empty(len(x))
    for i0, i1 in _blocks(len(x), len(L)):
        out[i0:i1] = -(_log_inner(x[i0:i1], p0, d, n, L) @ psi_v) / TWO_PI
    return out


# ----------------------------------------------------------------------------
# single-layer Galerkin matrix


def _psi_antiderivative(z):
    """Psi with Psi'' = log|z| and Psi(0) = 0."""
    z = np.asarray(z, float)
    z2 = z * z
    return 0.5 * z2 * _safe_log(z2) * 0.5 - 0.75 * z2


def _same_line_matrix(p0, p1, d, n, L):
    """Boolean (ns, ns) marking pairs of panels on one straight line."""
    cross = np.abs(d[:, None, 0] * d[None, :, 1] - d[:, None, 1] * d[None, :, 0])
    off0 = np.abs(np.einsum("id,jd->ij", n, p0) - np.einsum("id,id->i", n, p0)[:, None])
    off1 = np.abs(np.einsum("id,jd->ij", n, p1) - np.einsum("id,id->i", n, p0)[:, None])
    return (cross < _LINE_TOL) & (off0 < _LINE_TOL) & (off1 < _LINE_TOL)


def _collinear_double_integral(A2, B2, L1):
    """int_0^L1 int_[A2,B2] log|s-t| dt ds in coordinates of the outer line."""
    lo = np.minimum(A2, B2)
    hi = np.maximum(A2, B2)
    return (_psi_antiderivative(L1 - lo) + _psi_antiderivative(0.0 - hi)
            - _psi_antiderivative(0.0 - lo) - _psi_antiderivative(L1 - hi))


_WEDGE_PIECES = 9
_WEDGE_NODES = 24


def _wedge_double_integrals(e1, L1, e2, L2):
    """Double log integrals for panel pairs sharing a corner.

    Both panels are parametrized away from the common vertex with unit
    directions e1, e2 (arrays of shape (m, 2)).  The outer integrand
    ``I(s) = cos * s * log s + analytic`` gets its endpoint term removed
    in closed form; the analytic rest uses composite Gauss with pieces
    doubling away from the corner so that strongly graded neighbours
    stay accurate.
    """
    m = len(L1)
    cos = np.einsum("md,md->m", e1, e2)
    sin = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    xi, w = np.polynomial.legendre.leggauss(_WEDGE_NODES)
    scale = np.minimum(L1, L2)
    bounds = np.minimum(scale[:, None] * (2.0 ** np.arange(_WEDGE_PIECES))[None, :],
                        L1[:, None])
    bounds = np.concatenate([np.zeros((m, 1)), bounds], axis=1)
    bounds[:, -1] = L1
    lo = bounds[:, :-1]
    width = np.diff(bounds, axis=1)
    s = lo[:, :, None] + 0.5 * (xi[None, None, :] + 1.0) * width[:, :, None]
    ws = 0.5 * w[None, None, :] * width[:, :, None]
    s_flat = s.reshape(m, -1)
    ws_flat = ws.reshape(m, -1)

    # inner integral over panel 2 at x = s * e1, minus cos * s * log s
    s0 = s_flat * cos[:, None]
    h = s_flat * sin[:, None]
    a = -s0
    b = L2[:, None] - s0
    qa = a * a + h * h
    qb = b * b + h * h
    inner = 0.5 * (b * _safe_log(qb) - a * _safe_log(qa)) - L2[:, None] \
        + h * _atan_span(h, L2[:, None], a, b)
    rest = inner - cos[:, None] * s_flat * _safe_log(s_flat * s_flat) * 0.5
    gauss = np.einsum("mk,mk->m", ws_flat, rest)
    exact = cos * (0.5 * L1 * L1 * np.log(L1) - 0.25 * L1 * L1)
    return gauss + exact


def assemble_single_layer(bmesh: BoundaryMesh, n_gauss: int = 4) -> np.ndarray:
    """Dense Galerkin matrix of the single-layer operator on P0.

    Exactly symmetric; positive definite whenever diam(domain) < 1.
    ``n_gauss`` controls the outer quadrature for well-separated pairs.
    """
    p0, d, n, L = _frames(bmesh)
    p1 = p0 + L[:, None] * d
    ns = bmesh.num_segments

    pts, wts = bmesh.gauss_points(n_gauss)
    J = np.empty((ns, ns))
    for r0, r1 in _blocks(ns, ns * n_gauss):
        inner = _log_inner(pts[r0:r1].reshape(-1, 2), p0, d, n, L)
        J[r0:r1] = np.einsum("iq,iqj->ij", wts[r0:r1],
                             inner.reshape(r1 - r0, n_gauss, ns))
    J = 0.5 * (J + J.T)

    # panels on a common straight line: fully closed form
    same = _same_line_matrix(p0, p1, d, n, L)
    ii, jj = np.nonzero(same)
    if len(ii):
        # coordinates of panel j in the arclength frame of panel i
        A2 = np.einsum("kd,kd->k", p0[jj] - p0[ii], d[ii])
        B2 = np.einsum("kd,kd->k", p1[jj] - p0[ii], d[ii])
        J[ii, jj] = _collinear_double_integral(A2, B2, L[ii])

    # panels meeting at a corner (consecutive along the walk, oblique)
    nxt = np.roll(np.arange(ns), -1)
    oblique = ~same[np.arange(ns), nxt]
    k = np.flatnonzero(oblique)
    if len(k):
        kn = nxt[k]
        vals = _wedge_double_integrals(-d[k], L[k], d[kn], L[kn])
        J[k, kn] = vals
        J[kn, k] = vals

    J = 0.5 * (J + J.T)
    return -J / TWO_PI


# ----------------------------------------------------------------------------
# double layer and residual derivative


def _dl_panel_terms(points, p0, d, n, L, g0, g1):
    """Per-panel double-layer contributions ``H * int g(t)/D dt``.

    Returns the (m, ns) matrix whose row sum (over panels) times
    ``1/(2*pi)`` is the double-layer potential Kg at each point.  Panels
    whose line contains the evaluation point contribute zero.
    """
    s0, H = _panel_coords(points, p0, d, n)
    h = np.abs(H)
    a = -s0
    b = L[None, :] - s0
    span = _atan_span(h, L[None, :], a, b)
    qa = a * a + h * h
    qb = b * b + h * h
    mu = (g1 - g0) / L
    # H * A0 and H * A1 stay finite as h -> 0
    HA0 = np.sign(H) * span
    HA1 = 0.5 * H * (_safe_log(qb) - _safe_log(qa)) + s0 * HA0
    vals = g0[None, :] * HA0 + mu[None, :] * HA1
    on_line = h <= _LINE_TOL * np.maximum(L[None, :], 1.0)
    return np.where(on_line, 0.0, vals)


def double_layer_pointwise(bmesh: BoundaryMesh, g: BoundaryTrace, points) -> np.ndarray:
    """Double-layer potential Kg of an affine trace at arbitrary points.

    For points on the boundary this is the principal-value operator K.
    """
    p0, d, n, L = _frames(bmesh)
    g0, g1 = g.endpoint_values()
    x = np.atleast_2d(np.asarray(points, float))
    out = np.empty(len(x))
    for i0, i1 in _blocks(len(x), len(L)):
        out[i0:i1] = _dl_panel_terms(x[i0:i1], p0, d, n, L, g0, g1).sum(axis=1) / TWO_PI
    return out


def integrate_double_layer(bmesh: BoundaryMesh, g: BoundaryTrace, n_gauss: int = 4) -> np.ndarray:
    """Per-segment integrals ``int_E (K g) ds`` by outer Gauss quadrature."""
    pts, wts = bmesh.gauss_points(n_gauss)
    kg = double_layer_pointwise(bmesh, g, pts.reshape(-1, 2)).reshape(bmesh.num_segments, n_gauss)
    return np.einsum("sq,sq->s", wts, kg)


def integrate_trace(bmesh: BoundaryMesh, g: BoundaryTrace) -> np.ndarray:
    """Exact per-segment integrals of an affine trace."""
    g0, g1 = g.endpoint_values()
    return 0.5 * bmesh.lengths() * (g0 + g1)


def assemble_dl_rhs(bmesh: BoundaryMesh, g: BoundaryTrace, n_gauss: int = 4) -> np.ndarray:
    """Galerkin right-hand side ``int_E (K - 1/2) g ds`` per segment."""
    return integrate_double_layer(bmesh, g, n_gauss) - 0.5 * integrate_trace(bmesh, g)


def eval_residual_derivative(bmesh: BoundaryMesh, psi, g: BoundaryTrace,
                             n_gauss: int = 4):
    """Arclength derivative of ``(K - 1/2) g - V psi`` at panel Gauss nodes.

    Returns ``(values, points, weights)`` with shapes (ns, n_gauss),
    (ns, n_gauss, 2), (ns, n_gauss).  This is the integrand of the
    boundary residual indicator.  Evaluation exactly at panel endpoints
    is not defined (the derivative jumps there); Gauss nodes are always
    interior.
    """
    psi_v = psi.values if isinstance(psi, BemDensity) else np.asarray(psi, float)
    p0, d, n, L = _frames(bmesh)
    p1 = p0 + L[:, None] * d
    ns = bmesh.num_segments
    pts, wts = bmesh.gauss_points(n_gauss)
    x = pts.reshape(-1, 2)
    tau_all = np.repeat(bmesh.tangents(), n_gauss, axis=0)     # (m, 2)

    same = _same_line_matrix(p0, p1, d, n, L)
    seg_of_node = np.repeat(np.arange(ns), n_gauss)
    g0, g1 = g.endpoint_values()
    mu = (g1 - g0) / L

    out = np.empty(len(x))
    for i0, i1 in _blocks(len(x), ns):
        tau = tau_all[i0:i1]
        s0, H = _panel_coords(x[i0:i1], p0, d, n)
        h = np.abs(H)
        a = -s0
        b = L[None, :] - s0
        qa = a * a + h * h
        qb = b * b + h * h
        span = _atan_span(h, L[None, :], a, b)
        log_ratio = _safe_log(qa) - _safe_log(qb)

        td = np.einsum("md,pd->mp", tau, d)
        tn = np.einsum("md,pd->mp", tau, n)

        # tangential derivative of the single-layer potential of psi
        dV = -(0.5 * td * log_ratio + tn * np.sign(H) * span) @ psi_v / TWO_PI

        # tangential derivative of the double-layer potential of g; panels
        # on the evaluation line contribute zero (their kernel vanishes
        # there, and only there do the antiderivatives degenerate)
        mask = same[seg_of_node[i0:i1]]                        # (rows, ns)
        gs = g0[None, :] + mu[None, :] * s0
        with np.errstate(divide="ignore", invalid="ignore"):
            A0 = span / h
            A1 = -0.5 * log_ratio + s0 * A0
            B1u = 0.5 * (1.0 / qa - 1.0 / qb)
            B0 = 0.5 * (b / qb - a / qa) / (h * h) + 0.5 * span / h ** 3
            B2u = 0.5 * (a / qa - b / qb) + 0.5 * span / h
            dK = (tn * (g0[None, :] * A0 + mu[None, :] * A1)
                  - 2.0 * H * td * (-gs * B1u - mu[None, :] * B2u)
                  - 2.0 * H * H * tn * (gs * B0 + mu[None, :] * B1u))
        dK = np.where(mask, 0.0, dK).sum(axis=1) / TWO_PI
        out[i0:i1] = dK - dV

    vals = out - 0.5 * np.repeat(g.slopes(), n_gauss)
    return vals.reshape(ns, n_gauss), pts, wts


# ----------------------------------------------------------------------------
# error surrogate


def hminushalf_error_surrogate(bmesh: BoundaryMesh, phi_exact, psi,
                               n_gauss: int = 4) -> float:
    """Mesh-weighted L2 distance ``|| h^(1/2) (phi - psi) ||_{L2(Gamma)}``.

    ``phi_exact(points, normals)`` is the exact density, ``psi`` the
    piecewise-constant approximation; the weight is ``h|_E = |E|``.
    """
    psi_v = psi.values if isinstance(psi, BemDensity) else np.asarray(psi, float)
    pts, wts = bmesh.gauss_points(n_gauss)
    nrm = np.repeat(bmesh.normals()[:, None, :], n_gauss, axis=1)
    ph = phi_exact(pts.reshape(-1, 2), nrm.reshape(-1, 2)).reshape(bmesh.num_segments, n_gauss)
    dev = (ph - psi_v[:, None]) ** 2
    per_seg = np.einsum("sq,sq->s", wts, dev) * bmesh.lengths()
    return float(np.sqrt(per_seg.sum()))
