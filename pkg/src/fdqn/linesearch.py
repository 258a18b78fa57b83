"""Sampled backtracking line search and step/FD-parameter heuristics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .oracle import Batch, CrnOracle, EvaluationError, GradientEstimate

ACCEPTED = "accepted"
FAILED = "failed"


@dataclass(frozen=True)
class LineSearchConfig:
    c1: float = 1e-4
    tau: float = 0.5
    max_backtracks: int = 30

    def __post_init__(self):
        if not 0 < self.c1 < 1:
            raise ValueError(f"c1 must be in (0, 1), got {self.c1}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.max_backtracks < 1:
            raise ValueError(f"max_backtracks must be positive, got {self.max_backtracks}")


@dataclass
class LineSearchResult:
    status: str
    alpha: float
    trial_count: int
    f_new: float
    f_start: float = math.nan
    slope: float = math.nan  # g^T H g
    values: Optional[np.ndarray] = None  # per-sample values at the accepted point

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPTED


def initial_steplength(estimate: GradientEstimate, batch_size: int) -> tuple[float, bool]:
    """Variance-shrunk first trial step ``(1 + var / (|S| ||g||^2))^-1``.

    Returns ``(alpha, degenerate)``; a zero gradient gives ``(1.0, True)``.
    """
    gg = float(estimate.batch_gradient @ estimate.batch_gradient)
    if gg == 0:
        return 1.0, True
    return 1.0 / (1.0 + estimate.sample_variance / (batch_size * gg)), False


def fd_parameter(eps_m: float, lipschitz: float) -> float:
    """Forward-difference interval ``2 sqrt(eps_m / L)`` balancing truncation and round-off."""
    if not (eps_m > 0 and lipschitz > 0):
        raise ValueError("eps_m and lipschitz must both be positive")
    return 2.0 * math.sqrt(eps_m / lipschitz)


def _search(
    trial: Callable[[float], tuple], f0: float, slope: float, alpha0: float, cfg: LineSearchConfig, slack: float = 0.0
) -> LineSearchResult:
    alpha = float(alpha0)
    for count in range(1, cfg.max_backtracks + 1):
        try:
            f_new, values = trial(alpha)
        except EvaluationError:
            f_new, values = math.inf, None
        if f_new <= f0 - cfg.c1 * alpha * slope + slack:
            return LineSearchResult(ACCEPTED, alpha, count, f_new, f0, slope, values)
        if count < cfg.max_backtracks:
            alpha *= cfg.tau
    return LineSearchResult(FAILED, alpha, cfg.max_backtracks, f0, f0, slope, None)


def backtrack(
    oracle: CrnOracle,
    x,
    direction,
    g,
    batch: Batch,
    alpha0: float,
    cfg: LineSearchConfig = LineSearchConfig(),
    f0: Optional[float] = None,
) -> LineSearchResult:
    """Backtrack on the sampled objective ``F_S`` along ``-direction``.

    All trials use the samples of ``batch``, the batch the gradient ``g`` was
    estimated on. Each trial costs ``|S|`` evaluations; ``f0`` (the batch mean
    at ``x``) costs another ``|S|`` unless supplied. Non-finite trial values
    are rejections. A failed search is a normal return.
    """
    if not alpha0 > 0:
        raise ValueError(f"initial steplength must be positive, got {alpha0}")
    x = np.asarray(x, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if f0 is None:
        f0 = oracle.eval_batch_mean(x, batch)

    def trial(alpha):
        values = oracle.values(x - alpha * direction, batch.ids)[:, 0]
        return float(np.mean(values)), values

    return _search(trial, f0, float(np.asarray(g) @ direction), alpha0, cfg)


def armijo_search(
    fun, x, direction, g, f0: float, alpha0: float, cfg: LineSearchConfig = LineSearchConfig(), slack: float = 0.0
) -> LineSearchResult:
    """Deterministic counterpart of :func:`backtrack` for a plain callable.

    ``slack`` loosens the decrease test by an absolute amount; a few ulps of
    ``f0`` keep the search from stalling once decreases fall below round-off.
    """
    x = np.asarray(x, dtype=float)

    def trial(alpha):
        with np.errstate(over="ignore", invalid="ignore"):
            value = fun(x - alpha * direction)
        if not np.isfinite(value):
            raise EvaluationError("non-finite trial value")
        return value, None

    return _search(trial, f0, float(np.asarray(g) @ direction), alpha0, cfg, slack)
