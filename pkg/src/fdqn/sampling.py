"""Sample-size control: the practical FD norm and inner-product quasi-Newton tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .oracle import Batch, GradientEstimate, variance_subset_size

TEST_KINDS = ("norm", "ipqn", "fixed")
GROWTH_RULES = ("exact_required", "geometric")
DEFAULT_S_MAX = 100_000


@dataclass(frozen=True)
class SampleSizePolicy:
    theta: float = 0.9
    test_kind: str = "norm"
    s0: int = 2
    s_max: int = DEFAULT_S_MAX
    growth_rule: str = "exact_required"
    variance_fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError(f"theta must be in (0, 1), got {self.theta}")
        if self.test_kind not in TEST_KINDS:
            raise ValueError(f"unknown test {self.test_kind!r}; expected one of {TEST_KINDS}")
        if not 1 <= self.s0 <= self.s_max:
            raise ValueError(f"need 1 <= s0 <= s_max, got s0={self.s0}, s_max={self.s_max}")
        if self.growth_rule not in GROWTH_RULES:
            raise ValueError(f"unknown growth rule {self.growth_rule!r}; expected one of {GROWTH_RULES}")
        if not 0 < self.variance_fraction <= 1:
            raise ValueError(f"variance_fraction must be in (0, 1], got {self.variance_fraction}")


@dataclass(frozen=True)
class TestOutcome:
    passed: bool
    lhs: float
    rhs: float
    required_size: int

    __test__ = False  # keep pytest from collecting this class


def _decide(numerator: float, denominator: float, batch_size: int, s_max: int) -> TestOutcome:
    """Test ``numerator / |S| <= denominator`` and solve it for ``|S|``."""
    lhs = numerator / batch_size
    if denominator == 0:
        if numerator == 0:
            return TestOutcome(True, 0.0, 0.0, batch_size)
        return TestOutcome(False, lhs, 0.0, max(batch_size, s_max))
    passed = bool(lhs <= denominator)
    ratio = numerator / denominator
    if passed:
        required = batch_size
    elif math.isfinite(ratio):
        required = math.ceil(ratio)
    else:
        required = s_max
    return TestOutcome(passed, lhs, denominator, int(min(max(required, batch_size), max(s_max, batch_size))))


def norm_test(estimate: GradientEstimate, batch_size: int, theta: float, s_max: int = DEFAULT_S_MAX) -> TestOutcome:
    """``var / |S| <= theta^2 ||g_S||^2``.

    A zero gradient with positive variance fails and asks for ``s_max``;
    zero gradient and zero variance pass.
    """
    g = estimate.batch_gradient
    return _decide(estimate.sample_variance, theta * theta * float(g @ g), batch_size, s_max)


def ipqn_test(
    estimate: GradientEstimate, hg, hhg, batch_size: int, theta: float, s_max: int = DEFAULT_S_MAX
) -> TestOutcome:
    """Inner-product quasi-Newton test.

    Uses ``(H g_S)^T (H g_i) = (H H g_S)^T g_i``, so only ``hhg = H(H g_S)`` is
    needed on top of ``hg = H g_S``. The sample variance of these projections
    over ``S^v`` divided by ``|S|`` is compared with ``theta^2 ||H g_S||^4``.

    A zero direction cannot be certified: if the per-sample gradients still
    scatter, the test fails and asks for ``s_max``.
    """
    hg = np.asarray(hg, dtype=float)
    hhg = np.asarray(hhg, dtype=float)
    per_sample = estimate.per_sample_gradients
    n_v = per_sample.shape[0]
    hg_sq = float(hg @ hg)
    if hg_sq == 0 and estimate.sample_variance > 0:
        return TestOutcome(False, estimate.sample_variance / batch_size, 0.0, max(batch_size, s_max))
    if n_v < 2:
        variance = 0.0
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            dev = per_sample @ hhg - hg_sq
            variance = float(dev @ dev) / (n_v - 1)
    return _decide(variance, theta * theta * hg_sq * hg_sq, batch_size, s_max)


class SampleIds:
    """Hands out consecutive, never-repeated sample ids."""

    def __init__(self, start: int = 0):
        self.next_id = int(start)

    def take(self, n: int) -> np.ndarray:
        ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        return ids


def first_batch(policy: SampleSizePolicy, ids: SampleIds) -> Batch:
    return Batch(ids.take(policy.s0), variance_subset_size(policy.s0, policy.variance_fraction))


def next_batch(policy: SampleSizePolicy, current: Batch, outcome: TestOutcome, ids: SampleIds) -> Batch:
    """Fresh batch for the next iteration, resized when the test failed.

    A batch whose variance subset had a single sample is grown to at least
    two, since one sample gives no variance evidence.
    """
    size = len(current)
    if not outcome.passed:
        if policy.growth_rule == "geometric":
            size = max(outcome.required_size, 2 * size)
        else:
            size = max(outcome.required_size, size)
    if current.variance_subset_size < 2:
        size = max(size, 2)
    saturated = size > policy.s_max
    size = min(size, policy.s_max)
    return Batch(ids.take(size), variance_subset_size(size, policy.variance_fraction), saturated=saturated)
