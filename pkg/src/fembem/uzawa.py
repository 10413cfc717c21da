"""Inexact Uzawa outer iteration with adaptive inner solves.

One outer step j does, on a shared triangulation that both inner loops
may refine:

  [i]  update the boundary density: solve the integral equation
       ``V phi = (K - 1/2)(trace(u) - u0)`` adaptively until its
       estimator plus the algebraic solver energy drops below
       ``(c_bem * eps_j)^2``;
  [ii] compute the Riesz representer w of the interior residual at the
       current iterate, adaptively until ``eta^2 + algebraic <=
       (c_fem * eps_j)^2``;
  [iii] relax: ``u <- u + alpha * w``.

The tolerances contract geometrically, either with a fixed factor or
with the measured update-norm ratio (clamped below one).  Everything a
later step reuses - the iterate, the latest update, the density - is
carried through every refinement by prolongation, and the volume mesh
hierarchy feeds the multilevel preconditioner.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import bem
from .estimate import EstimatorReport, doerfler_mark, eta_fem, global_nu, mu_bem
from .fem import FeFunction, assemble_riesz, assemble_w_rhs, h1_error, h1_norm, prolongate
from .mesh import boundary_trace, make_initial_mesh, refine_nvb
from .model import ProblemSpec, make_problem
from .solver import (CholeskyFactor, JacobiPreconditioner, MeshHierarchy, pcg)

__all__ = [
    "UzawaConfig",
    "UzawaStepRecord",
    "UzawaResult",
    "UzawaDriver",
    "run_experiment_config",
]

_GAMMA_CLAMP = 0.99


@dataclass
class UzawaConfig:
    """Parameters of one experiment run."""

    example: str
    alpha: float = 0.05
    gamma: float = 0.95            # tolerance contraction (and adaptive bootstrap)
    adaptive_gamma: bool = False
    eps1: float = 1.0              # tolerance of the first outer step
    theta: float = 0.25            # Doerfler parameter, both loops
    tau_rel: float = 1e-3          # relative PCG stopping
    solver: str = "pcg"            # "pcg" | "exact"
    c_bem: float = 1.0             # stopping constant of step [i]
    c_fem: float = 1.0             # stopping constant of step [ii]
    budget_elements: int = 10_000
    target_nu: float = 0.0         # 0 disables the error-based stop
    max_outer: int = 1000
    mu_gauss: int = 4
    seed_values: Optional[dict] = None

    def __post_init__(self):
        if self.solver not in ("pcg", "exact"):
            raise ValueError("solver must be 'pcg' or 'exact'")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta out of (0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma out of (0, 1)")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")


@dataclass
class UzawaStepRecord:
    """Diagnostics of one outer step, in the order they are written out."""

    j: int
    num_elements: int
    err_h1: float
    err_gamma: float
    est_fem: float
    est_bem: float
    est_total: float
    k_bem: int
    k_fem: int
    gamma: float
    epsilon: float
    num_segments: int = 0
    w_norm: float = 0.0
    flags: tuple = ()


@dataclass
class UzawaResult:
    records: list
    u: FeFunction
    psi: bem.BemDensity
    mesh: object
    bmesh: object
    stop_reason: str
    flags: tuple = ()

    @property
    def num_outer(self) -> int:
        return len(self.records)


class UzawaDriver:
    """Stateful outer iteration; create one per run."""

    def __init__(self, problem, config: UzawaConfig,
                 observer: Optional[Callable] = None):
        self.problem = problem if isinstance(problem, ProblemSpec) else make_problem(problem)
        self.config = config
        self.observer = observer
        self.mesh = make_initial_mesh(self.problem.domain)
        self.bm = boundary_trace(self.mesh)
        self.hierarchy = MeshHierarchy(self.mesh)
        nv, ns = self.mesh.num_vertices, self.bm.num_segments
        self.u = FeFunction(self.mesh, np.zeros(nv))
        self.w_carry = FeFunction(self.mesh, np.zeros(nv))
        self.psi_vals = np.zeros(ns)
        self.eps = config.eps1
        self.prev_w_norm = None
        self.flags: set = set()
        self._inner_cap = 4 * config.budget_elements

    # -- mesh motion ---------------------------------------------------------

    def _refine(self, marked_tris, marked_segments):
        fine, rel = refine_nvb(self.mesh, marked_tris,
                               marked_segments=marked_segments, bmesh=self.bm)
        self.hierarchy.push(rel)
        self.u = prolongate(self.u, rel)
        self.w_carry = prolongate(self.w_carry, rel)
        self.psi_vals = self.psi_vals[rel.seg_father]
        self.mesh = fine
        self.bm = boundary_trace(fine)

    # -- pieces of one outer step --------------------------------------------

    def _interface_gap(self) -> bem.BoundaryTrace:
        """Affine boundary datum of the integral equation: trace(u) - I_h u0."""
        verts = self.bm.boundary_vertices
        vals = self.u.values[verts] - self.problem.u0(self.mesh.vertices[verts])
        return bem.BoundaryTrace(self.bm, vals)

    def _solve_spd(self, matrix, rhs, x0, precond, abs_cap):
        """SPD solve honouring both the relative and the absolute tolerance.

        Exact mode factorizes; otherwise PCG runs to the relative
        threshold but never returns with an algebraic energy that would
        by itself exceed the inner stopping budget ``abs_cap``.
        """
        if self.config.solver == "exact":
            return CholeskyFactor(matrix).solve(rhs), 0.0
        r = rhs - matrix @ x0
        z = precond.apply(r)
        e0 = float(r @ z)
        if e0 <= 0.0:
            return np.array(x0, dtype=float), 0.0
        rel = min(self.config.tau_rel ** 2, 0.5 * abs_cap / e0)
        res = pcg(matrix, rhs, x0=x0, preconditioner=precond,
                  rel_threshold=rel, max_iterations=2000)
        if not res.converged:
            self.flags.add("pcg_maxiter")
        return res.x, res.final_energy

    def _bem_step(self, tol: float):
        """Step [i]: adaptive boundary solve down to ``tol``."""
        rounds = 0
        while True:
            rounds += 1
            V = bem.assemble_single_layer(self.bm)
            g = self._interface_gap()
            rhs = bem.assemble_dl_rhs(self.bm, g)
            self.psi_vals, alg2 = self._solve_spd(
                V, rhs, self.psi_vals, JacobiPreconditioner.of(V), tol ** 2)
            psi = bem.BemDensity(self.bm, self.psi_vals)
            mu2 = mu_bem(self.bm, psi, g, du0_ds=self.problem.du0_ds,
                         n_gauss=self.config.mu_gauss)
            if self.observer is not None:
                self.observer(self, "bem", dict(mu2=mu2, alg2=alg2, psi=psi, g=g))
            if mu2.sum() + alg2 <= tol ** 2:
                return mu2, alg2, rounds
            if self.mesh.num_triangles > self._inner_cap:
                self.flags.add("inner_budget_exceeded")
                return mu2, alg2, rounds
            marked = doerfler_mark(mu2, self.config.theta)
            self._refine(np.zeros(0, dtype=np.int64), marked)

    def _fem_step(self, tol: float):
        """Step [ii]: adaptive Riesz solve of the residual representer."""
        rounds = 0
        w_guess = self.w_carry
        while True:
            rounds += 1
            R = assemble_riesz(self.mesh)
            rhs = assemble_w_rhs(self.mesh, self.bm, self.problem.f,
                                 self.problem.phi0, self.psi_vals, self.u,
                                 self.problem.operator)
            w_vals, alg2 = self._solve_spd(
                R, rhs, w_guess.values, self.hierarchy.preconditioner(), tol ** 2)
            w = FeFunction(self.mesh, w_vals)
            eta2 = eta_fem(self.mesh, self.bm, w, self.u, self.problem.f,
                           self.problem.phi0, self.psi_vals, self.problem.operator)
            if self.observer is not None:
                self.observer(self, "fem", dict(eta2=eta2, alg2=alg2, w=w))
            if eta2.sum() + alg2 <= tol ** 2:
                return w, eta2, alg2, rounds
            if self.mesh.num_triangles > self._inner_cap:
                self.flags.add("inner_budget_exceeded")
                return w, eta2, alg2, rounds
            marked = doerfler_mark(eta2, self.config.theta)
            self.w_carry = w
            self._refine(marked, np.zeros(0, dtype=np.int64))
            w_guess = self.w_carry

    # -- outer loop ------------------------------------------------------------

    def step(self, j: int) -> UzawaStepRecord:
        cfg = self.config
        step_flags = []

        mu2, bem_alg2, k_bem = self._bem_step(cfg.c_bem * self.eps)
        w, eta2, fem_alg2, k_fem = self._fem_step(cfg.c_fem * self.eps)

        self.u = FeFunction(self.mesh, self.u.values + cfg.alpha * w.values)
        self.w_carry = w
        w_norm = h1_norm(w)

        # contraction of the next tolerance
        if cfg.adaptive_gamma and self.prev_w_norm is not None and self.prev_w_norm > 0:
            gamma = w_norm / self.prev_w_norm
            if gamma >= 1.0:
                gamma = _GAMMA_CLAMP
                step_flags.append("gamma_clamped")
                self.flags.add("gamma_clamped")
        else:
            gamma = cfg.gamma
        eps_used = self.eps
        self.eps = gamma * self.eps
        self.prev_w_norm = w_norm

        report = EstimatorReport(eta_sq=eta2, mu_sq=mu2)
        nu = global_nu(report, w_norm, np.sqrt(fem_alg2), np.sqrt(bem_alg2))

        err_h1 = err_gamma = float("nan")
        exact = self.problem.exact
        if exact is not None:
            err_h1 = h1_error(self.u, exact.u, exact.grad_u)
            err_gamma = bem.hminushalf_error_surrogate(
                self.bm, exact.phi, self.psi_vals, n_gauss=cfg.mu_gauss)

        return UzawaStepRecord(
            j=j, num_elements=self.mesh.num_triangles,
            err_h1=err_h1, err_gamma=err_gamma,
            est_fem=report.eta, est_bem=report.mu, est_total=nu,
            k_bem=k_bem, k_fem=k_fem, gamma=gamma, epsilon=eps_used,
            num_segments=self.bm.num_segments, w_norm=w_norm,
            flags=tuple(step_flags),
        )

    def run(self) -> UzawaResult:
        cfg = self.config
        records = []
        reason = "max_outer"
        for j in range(1, cfg.max_outer + 1):
            rec = self.step(j)
            records.append(rec)
            if cfg.target_nu > 0.0 and rec.est_total <= cfg.target_nu:
                reason = "target"
                break
            if "inner_budget_exceeded" in self.flags:
                reason = "inner_budget"
                break
            if self.mesh.num_triangles >= cfg.budget_elements:
                reason = "budget"
                break
        return UzawaResult(
            records=records, u=self.u,
            psi=bem.BemDensity(self.bm, self.psi_vals),
            mesh=self.mesh, bmesh=self.bm,
            stop_reason=reason, flags=tuple(sorted(self.flags)),
        )


def run_experiment_config(config: UzawaConfig,
                          observer: Optional[Callable] = None) -> UzawaResult:
    """Build the example named by the config and run the outer iteration."""
    return UzawaDriver(make_problem(config.example), config, observer=observer).run()
