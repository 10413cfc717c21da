"""Outer saddle-point iteration: tolerances, records, stopping, transfer."""

import numpy as np
import pytest

from fembem.fem import h1_norm
from fembem.model import make_problem
from fembem.uzawa import (UzawaConfig, UzawaDriver, UzawaResult,
                          UzawaStepRecord, run_experiment_config)


def small_config(**overrides):
    base = dict(example="laplace_lshape", gamma=0.9, eps1=2.0,
                solver="exact", budget_elements=400)
    base.update(overrides)
    return UzawaConfig(**base)


class LastInnerValues:
    """Observer keeping, per outer step, the last inner quantity per phase."""

    def __init__(self):
        self.steps = []
        self._phase = None

    def __call__(self, driver, phase, payload):
        if phase == "bem" and self._phase != "bem":
            self.steps.append({})
        self._phase = phase
        if phase == "bem":
            val = float(payload["mu2"].sum() + payload["alg2"])
        else:
            val = float(payload["eta2"].sum() + payload["alg2"])
        self.steps[-1][phase] = val
        self.steps[-1][phase + "_payload"] = payload


# ---------------------------------------------------------------------------
# configuration validation


def test_config_rejects_bad_values():
    with pytest.raises(ValueError, match="solver must be 'pcg' or 'exact'"):
        UzawaConfig(example="laplace_lshape", solver="gmres")
    with pytest.raises(ValueError, match=r"theta out of \(0, 1\]"):
        UzawaConfig(example="laplace_lshape", theta=1.5)
    with pytest.raises(ValueError, match=r"gamma out of \(0, 1\)"):
        UzawaConfig(example="laplace_lshape", gamma=1.0)
    with pytest.raises(ValueError, match="alpha must be positive"):
        UzawaConfig(example="laplace_lshape", alpha=0.0)


# ---------------------------------------------------------------------------
# single steps


def test_first_step_is_scaled_update():
    obs = LastInnerValues()
    cfg = small_config(max_outer=1, budget_elements=10_000)
    res = run_experiment_config(cfg, observer=obs)
    assert res.num_outer == 1
    assert res.stop_reason == "max_outer"
    w = obs.steps[0]["fem_payload"]["w"]
    assert np.array_equal(res.u.values, cfg.alpha * w.values)


def test_tiny_relaxation_gives_tiny_iterate():
    res = run_experiment_config(small_config(alpha=1e-12, max_outer=1,
                                             budget_elements=10_000))
    rec = res.records[0]
    assert h1_norm(res.u) <= 1e-11 * rec.w_norm
    assert abs(h1_norm(res.u) - 1e-12 * rec.w_norm) <= 1e-15 * rec.w_norm


def test_second_step_extends_first_by_relaxed_update():
    drv = UzawaDriver(make_problem("laplace_lshape"), small_config())
    drv.step(1)
    u1 = drv.u.values.copy()
    level1 = len(drv.hierarchy._levels) - 1
    drv.step(2)
    level2 = len(drv.hierarchy._levels) - 1
    carried = u1
    for level in drv.hierarchy._levels[level1 + 1:level2 + 1]:
        carried = level.prolongation @ carried
    expected = carried + drv.config.alpha * drv.w_carry.values
    assert np.allclose(drv.u.values, expected, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------------------
# tolerance schedule


def test_fixed_contraction_schedule_and_record_invariants():
    obs = LastInnerValues()
    cfg = small_config()
    res = run_experiment_config(cfg, observer=obs)
    recs = res.records
    assert res.stop_reason == "budget"
    assert res.flags == ()
    assert [r.j for r in recs] == list(range(1, len(recs) + 1))
    assert recs[0].epsilon == cfg.eps1
    for before, after in zip(recs, recs[1:]):
        assert after.epsilon == before.gamma * before.epsilon
        assert after.num_elements >= before.num_elements
        assert after.num_segments >= before.num_segments
    for i, r in enumerate(recs):
        assert r.gamma == cfg.gamma
        assert abs(r.epsilon - cfg.eps1 * cfg.gamma ** i) <= 1e-12 * r.epsilon
        assert r.k_bem >= 1 and r.k_fem >= 1
        assert r.est_total == r.est_fem + r.est_bem + r.w_norm  # exact solver
        assert r.flags == ()

    # each inner loop returned at or below its share of the tolerance
    assert len(obs.steps) == len(recs)
    for r, step in zip(recs, obs.steps):
        assert step["bem"] <= (cfg.c_bem * r.epsilon) ** 2 * (1 + 1e-12)
        assert step["fem"] <= (cfg.c_fem * r.epsilon) ** 2 * (1 + 1e-12)


def test_inner_tolerance_respects_share_constants():
    obs = LastInnerValues()
    cfg = small_config(c_bem=0.5, solver="pcg", budget_elements=300)
    res = run_experiment_config(cfg, observer=obs)
    assert "inner_budget_exceeded" not in res.flags
    for r, step in zip(res.records, obs.steps):
        assert step["bem"] <= (0.5 * r.epsilon) ** 2 * (1 + 1e-12)
        assert step["fem"] <= r.epsilon ** 2 * (1 + 1e-12)


def test_adaptive_contraction_uses_update_norm_ratio():
    cfg = small_config(adaptive_gamma=True, gamma=0.9, max_outer=5,
                       budget_elements=10_000)
    res = run_experiment_config(cfg)
    recs = res.records
    assert len(recs) == 5
    assert recs[0].gamma == cfg.gamma          # bootstrap value
    for before, after in zip(recs, recs[1:]):
        if "gamma_clamped" not in after.flags:
            assert after.gamma == after.w_norm / before.w_norm
            assert after.gamma < 1.0
        else:
            assert after.gamma == 0.99
        assert after.epsilon == before.gamma * before.epsilon


def test_adaptive_contraction_clamps_growing_updates():
    drv = UzawaDriver(make_problem("laplace_lshape"),
                      small_config(adaptive_gamma=True))
    drv.step(1)
    drv.prev_w_norm = 1e-30      # next ratio is guaranteed >= 1
    rec = drv.step(2)
    assert rec.gamma == 0.99
    assert "gamma_clamped" in rec.flags
    assert "gamma_clamped" in drv.flags


# ---------------------------------------------------------------------------
# stopping


def test_budget_stop_and_nested_hierarchy():
    drv = UzawaDriver(make_problem("laplace_lshape"), small_config())
    res = drv.run()
    assert res.stop_reason == "budget"
    assert res.mesh.num_triangles >= 400
    sizes = [m.num_vertices for m in drv.hierarchy.meshes]
    assert all(b > a for a, b in zip(sizes, sizes[1:]))
    assert drv.hierarchy.finest is res.mesh


def test_target_stop_after_single_cheap_step():
    cfg = small_config(target_nu=1e9, eps1=1e9, budget_elements=10_000)
    res = run_experiment_config(cfg)
    assert res.stop_reason == "target"
    assert res.num_outer == 1
    assert res.records[0].k_bem == 1
    assert res.records[0].k_fem == 1


def test_inner_budget_flag_on_tiny_cap():
    cfg = small_config(eps1=1e-8, budget_elements=30)
    res = run_experiment_config(cfg)
    assert "inner_budget_exceeded" in res.flags
    assert res.stop_reason == "inner_budget"
    assert res.num_outer == 1
    assert res.mesh.num_triangles > 4 * 30


# ---------------------------------------------------------------------------
# reproducibility and solver choice


def test_run_experiment_config_matches_driver():
    cfg = small_config(budget_elements=200)
    res1 = run_experiment_config(cfg)
    res2 = UzawaDriver(make_problem(cfg.example), cfg).run()
    assert res1.stop_reason == res2.stop_reason
    assert res1.records == res2.records
    assert np.array_equal(res1.u.values, res2.u.values)
    assert np.array_equal(res1.psi.values, res2.psi.values)


def test_pcg_and_exact_solvers_agree_on_errors():
    err = {}
    for solver in ("exact", "pcg"):
        res = run_experiment_config(small_config(solver=solver))
        err[solver] = res.records[-1].err_h1
    ratio = err["pcg"] / err["exact"]
    assert 0.5 <= ratio <= 2.0


def test_result_containers():
    res = run_experiment_config(small_config(max_outer=2,
                                             budget_elements=10_000))
    assert isinstance(res, UzawaResult)
    assert res.num_outer == len(res.records) == 2
    assert all(isinstance(r, UzawaStepRecord) for r in res.records)
    rec = res.records[0]
    assert rec.num_elements >= 12 and rec.num_segments >= 8
    assert np.isfinite([rec.err_h1, rec.err_gamma, rec.est_fem, rec.est_bem,
                        rec.est_total, rec.w_norm]).all()
    assert res.psi.values.shape == (res.bmesh.num_segments,)
    assert res.u.values.shape == (res.mesh.num_vertices,)
