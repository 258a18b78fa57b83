import math

import numpy as np
import pytest

from fdqn.linesearch import LineSearchConfig
from fdqn.problems import chebyquad, quadratic
from fdqn.sampling import SampleSizePolicy
from fdqn.solver import (
    SG_ALPHA_GRID,
    ConfigError,
    SolverConfig,
    TuningError,
    _fd_sg_lockstep,
    run,
    run_adaptive,
    run_fd_sg,
    tune_fd_sg,
)

F_STAR = 0.017361508613838117  # noise-free Chebyquad (30, 45) optimum, from solve_reference


@pytest.fixture(scope="module")
def cq_abs():
    return chebyquad(noise_model="abs", sigma=1e-3)


@pytest.fixture(scope="module")
def adaptive_run(cq_abs):
    cfg = SolverConfig(method="fd_norm", policy=SampleSizePolicy(s0=64), max_evals=400_000, master_seed=1)
    return cfg, run(cq_abs, cq_abs.x_standard, cfg, f_star=F_STAR)


@pytest.mark.parametrize("method", ["fd_norm", "fd_ipqn"])
def test_noise_free_quadratic(method):
    prob = quadratic(np.eye(2))
    cfg = SolverConfig(method=method, policy=SampleSizePolicy(s0=3), max_iters=30)
    res = run_adaptive(prob, np.array([4.0, 3.0]), cfg)
    assert {r.batch_size for r in res.records} == {3}
    assert all(r.test_passed for r in res.records)
    assert len(res.records) <= 30
    assert np.linalg.norm(res.final_x) <= 1e-6


@pytest.mark.parametrize("method", ["fd_norm", "fd_ipqn", "fd_sg"])
def test_budget_below_one_gradient(method):
    prob = chebyquad(d=4, p=5, sigma=1e-3)
    cfg = SolverConfig(method=method, policy=SampleSizePolicy(s0=2), max_evals=9, sg_alpha=0.1)
    res = run(prob, prob.x_standard, cfg)
    assert res.stop_reason == "budget"
    assert res.records == [] and res.evals == 0
    np.testing.assert_array_equal(res.final_x, prob.x_standard)


def test_batch_sizes_non_decreasing_and_beat_fd_sg(cq_abs, adaptive_run):
    cfg, res = adaptive_run
    sizes = [r.batch_size for r in res.records]
    assert sizes[0] == 64
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))
    base = SolverConfig(method="fd_sg", sg_alpha=1.0, policy=SampleSizePolicy(s0=64), master_seed=1)
    tuned = tune_fd_sg(cq_abs, cq_abs.x_standard, base, cfg.max_evals, f_star=F_STAR)
    best = min(f for f in tuned.final_f_true()) - F_STAR
    assert res.final_err < best


def test_accounting_identity(cq_abs, adaptive_run):
    cfg, res = adaptive_run
    d = cq_abs.d
    prev = 0
    for rec in res.records:
        per_sample = d + 1 + rec.trials + (d if rec.curvature != "none" else 0)
        assert rec.cum_evals - prev == per_sample * rec.batch_size
        prev = rec.cum_evals
    assert prev == res.evals


def test_full_overlap_and_descent(cq_abs, adaptive_run):
    cfg, res = adaptive_run
    seen = set()
    for rec in res.records:
        first, count = rec.gradient_ids
        assert count == rec.batch_size
        assert first not in seen  # fresh ids every iteration
        seen.add(first)
        if rec.curvature != "none":
            assert rec.curvature_ids == rec.gradient_ids
        if rec.ls_status == "accepted":
            assert rec.f_sampled <= rec.f_start - cfg.ls.c1 * rec.alpha * rec.slope


def test_budget_compliance(cq_abs, adaptive_run):
    cfg, res = adaptive_run
    assert res.stop_reason == "budget"
    last = res.records[-1]
    overshoot = (2 * cq_abs.d + 1 + cfg.ls.max_backtracks) * last.batch_size
    assert res.evals <= cfg.max_evals + overshoot
    assert all(b.cum_evals > a.cum_evals for a, b in zip(res.records, res.records[1:]))


def test_err_is_f_true_minus_f_star(adaptive_run):
    _, res = adaptive_run
    for rec in res.records:
        assert rec.err == rec.f_true - F_STAR


@pytest.mark.parametrize("method", ["fd_norm", "fd_ipqn", "fd_sg"])
def test_reproducible(method):
    prob = chebyquad(d=8, p=12, noise_model="rel", sigma=1e-3)
    cfg = SolverConfig(method=method, policy=SampleSizePolicy(s0=4), max_evals=30_000, master_seed=9, sg_alpha=2**-6)
    a = run(prob, prob.x_standard, cfg)
    b = run(prob, prob.x_standard, cfg)
    assert a.records == b.records
    np.testing.assert_array_equal(a.final_x, b.final_x)


def test_seed_changes_trajectory():
    prob = chebyquad(d=8, p=12, noise_model="abs", sigma=1e-3)
    cfgs = [SolverConfig(method="fd_norm", policy=SampleSizePolicy(s0=4), max_evals=5_000, master_seed=s) for s in (1, 2)]
    a, b = (run(prob, prob.x_standard, c) for c in cfgs)
    assert not np.array_equal(a.final_x, b.final_x)


def test_fd_sg_closed_form():
    nu = 1e-8
    prob = quadratic(np.eye(2))
    x0 = np.array([4.0, 3.0])
    cfg = SolverConfig(method="fd_sg", sg_alpha=0.5, nu=nu, policy=SampleSizePolicy(s0=1), max_iters=25)
    res = run_fd_sg(prob, x0, cfg)
    assert len(res.records) == 25 and res.stop_reason == "max_iters"
    k = 25
    expected = 0.5**k * x0 - nu / 2 * (1 - 0.5**k)
    np.testing.assert_allclose(res.final_x, expected, rtol=0, atol=1e-12)
    assert [r.cum_evals for r in res.records] == [3 * (i + 1) for i in range(25)]


def test_fd_sg_divergence_is_clean():
    prob = chebyquad(noise_model="abs", sigma=1e-3)
    cfg = SolverConfig(method="fd_sg", sg_alpha=2.0**10, policy=SampleSizePolicy(s0=2), max_evals=100_000)
    res = run_fd_sg(prob, prob.x_standard, cfg, f_star=F_STAR)
    assert res.stop_reason == "divergence"
    assert all(math.isfinite(r.f_true) for r in res.records)
    assert np.all(np.isfinite(res.final_x))


def test_lockstep_equals_solo_runs():
    prob = chebyquad(d=10, p=15, noise_model="abs", sigma=1e-3)
    alphas = [2.0**-12, 2.0**-6, 2.0**-2, 2.0**6]
    cfg = SolverConfig(method="fd_sg", sg_alpha=1.0, policy=SampleSizePolicy(s0=3), max_evals=20_000, master_seed=4)
    together = _fd_sg_lockstep(prob, prob.x_standard, alphas, cfg, f_star=0.0)
    for a, res in zip(alphas, together):
        solo = run_fd_sg(prob, prob.x_standard, SolverConfig(**{**cfg.__dict__, "sg_alpha": a}), f_star=0.0)
        assert res.stop_reason == solo.stop_reason
        assert res.records == solo.records
        np.testing.assert_array_equal(res.final_x, solo.final_x)


def test_tune_grid_and_argmin():
    assert len(SG_ALPHA_GRID) == 31
    assert SG_ALPHA_GRID[0] == 2.0**-20 and SG_ALPHA_GRID[-1] == 2.0**10
    prob = quadratic(np.eye(3))
    base = SolverConfig(method="fd_sg", sg_alpha=1.0, policy=SampleSizePolicy(s0=1))
    tuned = tune_fd_sg(prob, np.array([1.0, -2.0, 3.0]), base, budget_per_trial=3 * 4, f_star=0.0)
    assert tuned.best_alpha == 1.0
    finals = tuned.final_f_true()
    best = finals[tuned.alphas.index(tuned.best_alpha)]
    assert all(best <= f for f in finals)
    assert math.log2(tuned.best_alpha) == round(math.log2(tuned.best_alpha))


def test_tune_all_divergent_names_problem():
    prob = chebyquad(noise_model="abs", sigma=1e-3)
    base = SolverConfig(method="fd_sg", sg_alpha=1.0, policy=SampleSizePolicy(s0=2))
    with pytest.raises(TuningError, match="chebyquad"):
        tune_fd_sg(prob, 10 * prob.x_standard, base, budget_per_trial=62 * 20, alphas=[2.0**5, 2.0**10])


def test_config_errors_before_evaluation():
    with pytest.raises(ConfigError):
        SolverConfig(method="fd_sg")
    with pytest.raises(ConfigError):
        SolverConfig(method="newton")
    with pytest.raises(ConfigError):
        SolverConfig(nu=0.0)
    prob = chebyquad(d=4, p=5)
    with pytest.raises(ConfigError):
        run(prob, np.zeros(3), SolverConfig())
    with pytest.raises(ConfigError):
        run_fd_sg(prob, prob.x_standard, SolverConfig())


def test_resample_policy_keeps_going():
    prob = chebyquad(d=6, p=9, noise_model="rel", sigma=1e-5)
    cfg = SolverConfig(
        method="fd_norm",
        policy=SampleSizePolicy(s0=2),
        ls=LineSearchConfig(max_backtracks=3),
        ls_failure_policy="resample",
        max_iters=200,
    )
    res = run_adaptive(prob, prob.x_standard, cfg)
    statuses = [r.ls_status for r in res.records]
    assert res.stop_reason in ("max_iters", "budget")
    assert "failed" in statuses
    assert statuses[-1] != "failed" or res.stop_reason != "line_search_failure"


def test_gradient_degenerate_stop():
    # noise-free quadratic started at the FD fixed point: the FD gradient is exactly zero
    prob = quadratic(np.eye(2))
    nu = 2.0**-10
    res = run_adaptive(prob, np.full(2, -nu / 2), SolverConfig(nu=nu, policy=SampleSizePolicy(s0=1)))
    assert res.stop_reason == "gradient_degenerate"
    assert len(res.records) == 1
