import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdqn.oracle import Batch, CrnOracle, GradientEstimate, sample_variance
from fdqn.problems import chebyquad
from fdqn.sampling import SampleIds, SampleSizePolicy, first_batch, ipqn_test, next_batch, norm_test


def estimate_from(per_sample, g=None):
    per_sample = np.asarray(per_sample, dtype=float)
    g = per_sample.mean(axis=0) if g is None else np.asarray(g, dtype=float)
    return GradientEstimate(g, per_sample, sample_variance(per_sample, g), 0, np.zeros(len(per_sample)))


def estimate_with(variance, g):
    g = np.asarray(g, dtype=float)
    return GradientEstimate(g, g[None], float(variance), 0, np.zeros(1))


# --- norm test ---------------------------------------------------------------------


def test_norm_zero_variance_passes():
    out = norm_test(estimate_with(0.0, [0.3, -2.0]), 5, 0.9)
    assert out.passed and out.required_size == 5


def test_norm_hand_pass():
    out = norm_test(estimate_with(1.0, [1.0, 0.0]), 10, 0.9)
    assert out.passed
    assert out.lhs == pytest.approx(0.1)
    assert out.rhs == pytest.approx(0.81)


def test_norm_hand_fail():
    out = norm_test(estimate_with(9.0, [0.0, 1.0]), 10, 0.9)
    assert not out.passed
    assert out.lhs == pytest.approx(0.9)
    assert out.required_size == 12


def test_norm_zero_gradient():
    assert norm_test(estimate_with(0.0, [0.0, 0.0]), 4, 0.9).passed
    out = norm_test(estimate_with(1.0, [0.0, 0.0]), 4, 0.9, s_max=500)
    assert not out.passed and out.required_size == 500


def test_norm_huge_ratio_clamps():
    out = norm_test(estimate_with(1e300, [1e-200, 0.0]), 4, 0.9, s_max=1000)
    assert not out.passed and out.required_size == 1000


# --- ipqn test ---------------------------------------------------------------------


def test_ipqn_equal_samples_pass():
    est = estimate_from([[1.0, 2.0]] * 3)
    out = ipqn_test(est, est.batch_gradient, est.batch_gradient, 3, 0.9)
    assert out.passed and out.lhs == 0.0


def test_ipqn_identity_zero_projection_variance():
    est = estimate_from([[2.0, 0.0], [0.0, 2.0]])
    g = est.batch_gradient  # (1, 1)
    out = ipqn_test(est, g, g, 2, 0.9)
    assert out.passed and out.lhs == 0.0


def test_ipqn_identity_hand_fail():
    est = estimate_from([[2.0, 0.0], [0.0, 0.0]])
    g = est.batch_gradient  # (1, 0)
    out = ipqn_test(est, g, g, 2, 0.9)
    assert not out.passed
    assert out.lhs == pytest.approx(1.0)
    assert out.rhs == pytest.approx(0.81)
    assert out.required_size == 3


def test_ipqn_zero_direction():
    est = estimate_from([[1.0, 0.0], [-1.0, 0.0]])
    out = ipqn_test(est, np.zeros(2), np.zeros(2), 2, 0.9, s_max=777)
    assert not out.passed and out.required_size == 777


def test_ipqn_single_sample_subset_has_no_variance():
    est = estimate_from([[1.0, 3.0]])
    assert ipqn_test(est, est.batch_gradient, est.batch_gradient, 1, 0.9).passed


# --- properties ----------------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
grads = arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 5)), elements=finite)


@settings(max_examples=60, deadline=None)
@given(grads, st.floats(0.05, 20).filter(lambda c: abs(c) > 1e-3), st.integers(1, 50), st.floats(0.1, 0.95))
def test_norm_scale_invariance(per_sample, c, n, theta):
    est = estimate_from(per_sample)
    assume(est.batch_gradient @ est.batch_gradient > 1e-6)
    a = norm_test(est, n, theta)
    b = norm_test(estimate_from(c * per_sample), n, theta)
    # passed flips only if lhs and rhs were within rounding of each other
    if abs(a.lhs - a.rhs) > 1e-9 * max(a.lhs, a.rhs):
        assert a.passed == b.passed
        assert abs(a.required_size - b.required_size) <= 1


@settings(max_examples=60, deadline=None)
@given(grads, st.integers(1, 40), st.integers(1, 40), st.floats(0.1, 0.95))
def test_norm_monotone_in_batch_size(per_sample, n1, n2, theta):
    est = estimate_from(per_sample)
    small, large = sorted((n1, n2))
    if norm_test(est, small, theta).passed:
        assert norm_test(est, large, theta).passed


@settings(max_examples=60, deadline=None)
@given(grads, st.floats(0.1, 0.95), st.floats(0.1, 0.95))
def test_required_size_non_increasing_in_theta(per_sample, t1, t2):
    est = estimate_from(per_sample)
    lo, hi = sorted((t1, t2))
    assert norm_test(est, 1, hi).required_size <= norm_test(est, 1, lo).required_size


@settings(max_examples=60, deadline=None)
@given(grads, st.integers(1, 40))
def test_ipqn_identity_bounded_by_norm(per_sample, n):
    est = estimate_from(per_sample)
    g = est.batch_gradient
    ipqn = ipqn_test(est, g, g, n, 0.9)
    norm = norm_test(est, n, 0.9)
    assert ipqn.lhs <= (g @ g) * norm.lhs * (1 + 1e-9) + 1e-9


def test_noise_free_norm_test_passes_with_one_sample():
    prob = chebyquad(d=5, p=7)
    est = CrnOracle(prob).fd_gradient_batch(prob.x_standard, 1e-8, Batch.of([0]))
    assert norm_test(est, 1, 0.9).passed


# --- next_batch -------------------------------------------------------------------------


class _Outcome:
    def __init__(self, passed, required_size):
        self.passed = passed
        self.required_size = required_size


def test_passed_keeps_size_with_fresh_ids():
    ids = SampleIds()
    pol = SampleSizePolicy(s0=64)
    b0 = first_batch(pol, ids)
    b1 = next_batch(pol, b0, _Outcome(True, 64), ids)
    assert len(b1) == 64
    assert set(b0.ids).isdisjoint(b1.ids)
    assert b1.ids[0] == b0.ids[-1] + 1


def test_failed_exact_required():
    ids = SampleIds()
    pol = SampleSizePolicy(s0=10)
    b = next_batch(pol, first_batch(pol, ids), _Outcome(False, 12), ids)
    assert len(b) == 12 and not b.saturated


def test_failed_geometric():
    ids = SampleIds()
    pol = SampleSizePolicy(s0=10, growth_rule="geometric")
    assert len(next_batch(pol, first_batch(pol, ids), _Outcome(False, 12), ids)) == 20
    assert len(next_batch(pol, first_batch(pol, ids), _Outcome(False, 35), ids)) == 35


def test_saturation():
    ids = SampleIds()
    pol = SampleSizePolicy(s0=10, s_max=100_000)
    b = next_batch(pol, first_batch(pol, ids), _Outcome(False, 10**9), ids)
    assert len(b) == 100_000 and b.saturated


def test_single_sample_subset_forces_two():
    ids = SampleIds()
    pol = SampleSizePolicy(s0=1)
    b = next_batch(pol, first_batch(pol, ids), _Outcome(True, 1), ids)
    assert len(b) == 2 and b.variance_subset_size == 2


def test_policy_validation():
    for bad in (dict(theta=1.0), dict(theta=0.0), dict(s0=0), dict(s0=10, s_max=5), dict(test_kind="x"), dict(growth_rule="x")):
        with pytest.raises(ValueError):
            SampleSizePolicy(**bad)


def test_sizes_non_decreasing_under_constant_variance(linear_noise_problem):
    # per-sample gradients = mean + noise with fixed variance; the estimate's
    # variance is stationary, so exact_required growth never shrinks the batch
    from fdqn.oracle import GaussianNoise

    class Shifted(linear_noise_problem):
        sigma = 1.0

    prob = Shifted(3)
    oracle = CrnOracle(prob, noise=lambda ids, p: GaussianNoise(1.0, 7)(ids, p) + 0.4)
    pol = SampleSizePolicy(s0=2)
    ids = SampleIds()
    batch = first_batch(pol, ids)
    sizes = []
    for _ in range(30):
        est = oracle.fd_gradient_batch(np.zeros(3), 1.0, batch)
        sizes.append(len(batch))
        batch = next_batch(pol, batch, norm_test(est, len(batch), pol.theta, pol.s_max), ids)
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))
    assert sizes[-1] > sizes[0]
