"""Problem data: interior operators, manufactured solutions, registry.

Every example couples an interior problem ``-div A(grad u) = f`` on a
polygonal domain with an exterior Laplace field through transmission
data ``u0 = u - u_ext`` and ``phi0 = (A(grad u) - grad u_ext) . n`` on
the interface.  The exterior field is ``u_ext = log|x - x_star|`` with
a pole inside the domain, so the exact interface density is
``phi = n.(x - x_star)/|x - x_star|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fem import TRI_P5, FeFunction, TriangleRule, assemble_stiffness

__all__ = [
    "InteriorOperator",
    "ExactData",
    "ProblemSpec",
    "chi",
    "chi_prime",
    "make_problem",
    "EXAMPLES",
    "apply_interior_operator",
    "monotonicity_probe",
]

_POLE = np.array([-0.125, 0.125])


@dataclass(frozen=True)
class InteriorOperator:
    """Flux map ``g -> A(x, g)`` plus optional lower-order terms.

    All callbacks are vectorized: ``a_flux(points (n,2), grads (n,2))``
    returns (n, 2); ``b_lower`` and ``c_react`` return (n,) and may be
    None.  ``monotone`` / ``lipschitz`` record the constants of the map.
    """

    a_flux: Callable
    b_lower: Optional[Callable] = None
    c_react: Optional[Callable] = None
    monotone: float = 1.0
    lipschitz: float = 1.0


@dataclass(frozen=True)
class ExactData:
    u: Callable               # (n,2) -> (n,)
    grad_u: Callable          # (n,2) -> (n,2)
    u_ext: Callable
    grad_u_ext: Callable

    def phi(self, points, normals):
        """Exact interface density: normal trace of the exterior field."""
        return np.einsum("nd,nd->n", np.asarray(normals, float),
                         self.grad_u_ext(points))


@dataclass(frozen=True)
class ProblemSpec:
    """Everything the solver needs about one example."""

    name: str
    domain: str
    operator: InteriorOperator
    f: Callable                       # volume load, (n,2) -> (n,)
    u0: Callable                      # jump of traces, (n,2) -> (n,)
    phi0: Callable                    # jump of fluxes, (points, normals) -> (n,)
    du0_ds: Callable                  # arclength derivative of u0, (points, tangents) -> (n,)
    exact: Optional[ExactData] = None
    c_rad: float = 1.0


# ----------------------------------------------------------------------------
# the tanh nonlinearity

_CHI_SMALL = 1e-4


def chi(t):
    """chi(t) = 1 + tanh(t)/t, continuously extended by chi(0) = 2."""
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < _CHI_SMALL
    ts = np.where(small, 1.0, t)
    out = 1.0 + np.tanh(ts) / ts
    t2 = t * t
    series = 2.0 - t2 / 3.0 + 2.0 * t2 * t2 / 15.0
    return np.where(small, series, out)


def chi_prime(t):
    """Derivative of chi, with a series branch near zero."""
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < _CHI_SMALL
    ts = np.where(small, 1.0, t)
    out = (ts / np.cosh(ts) ** 2 - np.tanh(ts)) / ts ** 2
    series = -2.0 * t / 3.0 + 8.0 * t ** 3 / 15.0
    return np.where(small, series, out)


# ----------------------------------------------------------------------------
# corner singularities in polar form


def _polar(points):
    """Radius and angle in [0, 2*pi), branch cut inside the removed wedge."""
    p = np.asarray(points, dtype=float)
    r = np.hypot(p[..., 0], p[..., 1])
    phi = np.arctan2(p[..., 1], p[..., 0])
    phi = np.where(phi < 0.0, phi + 2.0 * np.pi, phi)
    return r, phi


def _corner_u(beta):
    """u = r^beta cos(beta phi), harmonic with Neumann edges at the corner."""

    def u(points):
        r, phi = _polar(points)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = r ** beta * np.cos(beta * phi)
        return np.where(r == 0.0, 0.0, vals)

    return u


def _corner_grad(beta):
    # grad(r^b cos(b phi)) = b r^(b-1) (cos((b-1)phi), -sin((b-1)phi))
    def grad(points):
        r, phi = _polar(points)
        with np.errstate(divide="ignore", invalid="ignore"):
            mag = beta * r ** (beta - 1.0)
        mag = np.where(r == 0.0, 0.0, mag)
        return np.stack([mag * np.cos((beta - 1.0) * phi),
                         -mag * np.sin((beta - 1.0) * phi)], axis=-1)
    return grad


def _exact_data(beta):
    u = _corner_u(beta)
    grad_u = _corner_grad(beta)

    def u_ext(points):
        d = np.asarray(points, float) - _POLE
        return np.log(np.hypot(d[..., 0], d[..., 1]))

    def grad_u_ext(points):
        d = np.asarray(points, float) - _POLE
        return d / np.einsum("...d,...d->...", d, d)[..., None]

    return ExactData(u=u, grad_u=grad_u, u_ext=u_ext, grad_u_ext=grad_u_ext)


def _transmission_callbacks(exact: ExactData, flux_of_grad):
    def u0(points):
        return exact.u(points) - exact.u_ext(points)

    def phi0(points, normals):
        flux = flux_of_grad(points, exact.grad_u(points)) - exact.grad_u_ext(points)
        return np.einsum("nd,nd->n", np.asarray(normals, float), flux)

    def du0_ds(points, tangents):
        dg = exact.grad_u(points) - exact.grad_u_ext(points)
        return np.einsum("nd,nd->n", np.asarray(tangents, float), dg)

    return u0, phi0, du0_ds


def _laplace_lshape() -> ProblemSpec:
    exact = _exact_data(2.0 / 3.0)
    op = InteriorOperator(a_flux=lambda x, g: np.asarray(g, float),
                          monotone=1.0, lipschitz=1.0)
    u0, phi0, du0 = _transmission_callbacks(exact, lambda x, g: g)
    return ProblemSpec(
        name="laplace_lshape", domain="lshape", operator=op,
        f=lambda x: np.zeros(len(np.atleast_2d(x))),
        u0=u0, phi0=phi0, du0_ds=du0, exact=exact)


def _scaled_laplace_lshape() -> ProblemSpec:
    exact = _exact_data(2.0 / 3.0)
    op = InteriorOperator(a_flux=lambda x, g: 0.1 * np.asarray(g, float),
                          monotone=0.1, lipschitz=0.1)
    u0, phi0, du0 = _transmission_callbacks(exact, lambda x, g: 0.1 * g)
    return ProblemSpec(
        name="scaled_laplace_lshape", domain="lshape", operator=op,
        f=lambda x: np.zeros(len(np.atleast_2d(x))),
        u0=u0, phi0=phi0, du0_ds=du0, exact=exact)


def _nonlinear_zshape() -> ProblemSpec:
    beta = 4.0 / 7.0
    exact = _exact_data(beta)

    def a_flux(points, grads):
        g = np.asarray(grads, float)
        t = np.linalg.norm(g, axis=-1)
        return chi(t)[..., None] * g

    op = InteriorOperator(a_flux=a_flux, monotone=1.0, lipschitz=2.0)
    u0, phi0, du0 = _transmission_callbacks(exact, a_flux)

    def f(points):
        # f = -div(chi(|grad u|) grad u) for the harmonic corner function:
        # only the chi'(t) grad t . grad u term survives.
        r, phi = _polar(points)
        r = np.maximum(r, 1e-300)
        t = beta * r ** (beta - 1.0)
        return -chi_prime(t) * beta ** 2 * (beta - 1.0) * r ** (2.0 * beta - 3.0) \
            * np.cos(beta * phi)

    return ProblemSpec(
        name="nonlinear_zshape", domain="zshape", operator=op,
        f=f, u0=u0, phi0=phi0, du0_ds=du0, exact=exact)


EXAMPLES = {
    "laplace_lshape": _laplace_lshape,
    "scaled_laplace_lshape": _scaled_laplace_lshape,
    "nonlinear_zshape": _nonlinear_zshape,
}


def make_problem(name: str) -> ProblemSpec:
    try:
        return EXAMPLES[name]()
    except KeyError:
        raise ValueError(f"unknown example {name!r}; known: {sorted(EXAMPLES)}") from None


# ----------------------------------------------------------------------------
# applying the interior operator to discrete functions


def apply_interior_operator(operator: InteriorOperator, u: FeFunction,
                            rule: TriangleRule = TRI_P5) -> np.ndarray:
    """Vector of ``a(u; hat_i) = (A(grad u), grad hat_i) + (b, hat_i) + (c(u), hat_i)``.

    The flux term is exact for P1 (constant gradients); lower-order
    terms use triangle quadrature.
    """
    from .fem import _hat_gradients

    mesh = u.mesh
    area = mesh.areas()
    g = _hat_gradients(mesh)
    grads = u.element_gradients()
    centroids = mesh.corners().mean(axis=1)
    flux = operator.a_flux(centroids, grads)          # (nt, 2), constant per element
    contrib = np.einsum("td,tkd->tk", flux, g) * area[:, None]
    out = np.zeros(mesh.num_vertices)
    np.add.at(out, mesh.triangles.reshape(-1), contrib.reshape(-1))

    if operator.b_lower is not None or operator.c_react is not None:
        pts = rule.points(mesh).reshape(-1, 2)
        dens = np.zeros((mesh.num_triangles, len(rule.weights)))
        if operator.b_lower is not None:
            gq = np.repeat(grads, len(rule.weights), axis=0)
            dens += operator.b_lower(pts, gq).reshape(dens.shape)
        if operator.c_react is not None:
            uq = u.at_barycentric(rule.barycentric)
            dens += operator.c_react(pts, uq.reshape(-1)).reshape(dens.shape)
        low = np.einsum("q,tq,qk->tk", rule.weights, dens, rule.barycentric) * area[:, None]
        np.add.at(out, mesh.triangles.reshape(-1), low.reshape(-1))
    return out


def monotonicity_probe(operator: InteriorOperator, mesh, trials: int = 100,
                       rng: np.random.Generator = None):
    """Empirical monotonicity/Lipschitz quotients of the flux map.

    Draws random pairs of P1 functions and returns (min, max) over the
    trials of ``<a(w) - a(v), w - v> / |w - v|_{H^1-semi}^2``.  For a
    linear flux ``A = s*I`` both bounds equal ``s``; for the tanh flux
    the quotient stays within [1, 2].
    """
    rng = np.random.default_rng(0) if rng is None else rng
    K = assemble_stiffness(mesh)
    nv = mesh.num_vertices
    lo, hi = np.inf, -np.inf
    for _ in range(trials):
        scale_v = 10.0 ** rng.uniform(-2, 2)
        scale_w = 10.0 ** rng.uniform(-2, 2)
        v = FeFunction(mesh, rng.standard_normal(nv) * scale_v)
        w = FeFunction(mesh, rng.standard_normal(nv) * scale_w)
        d = w.values - v.values
        den = float(d @ (K @ d))
        if den <= 0:
            continue
        num = float((apply_interior_operator(operator, w)
                     - apply_interior_operator(operator, v)) @ d)
        q = num / den
        lo, hi = min(lo, q), max(hi, q)
    return lo, hi
