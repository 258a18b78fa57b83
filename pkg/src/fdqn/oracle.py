"""Common-random-number zero-order oracle.

Sample ``i`` stands for one realization ``zeta_i``. Its noise vector is a pure
function of ``(master_seed, i)``, so the same ``zeta_i`` can be replayed at any
number of points. Function values are computed for a whole block of points and
samples at once: residuals once per point, noise once per sample.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import standard_normal

# (samples x points) entries evaluated per vectorized block
_BLOCK = 1 << 16


class EvaluationError(ArithmeticError):
    """A function value came out non-finite (the iterate has diverged)."""


@dataclass(frozen=True)
class CrnSample:
    id: int


@dataclass(frozen=True)
class Batch:
    """Sample ids ``S_k``; the first ``variance_subset_size`` of them form ``S_k^v``."""

    ids: np.ndarray
    variance_subset_size: int
    saturated: bool = False

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        if ids.ndim != 1 or ids.size < 1:
            raise ValueError("a batch needs at least one sample id")
        if not 1 <= self.variance_subset_size <= ids.size:
            raise ValueError(f"variance subset size {self.variance_subset_size} not in [1, {ids.size}]")
        if np.unique(ids).size != ids.size:
            raise ValueError("sample ids within a batch must be distinct")

    @classmethod
    def of(cls, ids, variance_fraction: float = 1.0) -> "Batch":
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        return cls(ids, variance_subset_size(ids.size, variance_fraction))

    def __len__(self):
        return int(self.ids.size)

    @property
    def variance_ids(self) -> np.ndarray:
        return self.ids[: self.variance_subset_size]


def variance_subset_size(n: int, fraction: float = 1.0) -> int:
    """Size of ``S^v`` for a batch of ``n``: at least 2 whenever ``n >= 2``."""
    if not 0 < fraction <= 1:
        raise ValueError(f"variance fraction must be in (0, 1], got {fraction}")
    return min(n, max(2, int(np.ceil(fraction * n))))


@dataclass
class GradientEstimate:
    batch_gradient: np.ndarray
    per_sample_gradients: np.ndarray  # rows for the variance subset
    sample_variance: float
    evals_used: int
    base_values: np.ndarray  # f(x, zeta_i) for every sample in the batch

    @property
    def sampled_value(self) -> float:
        return float(np.mean(self.base_values))


def sample_variance(per_sample: np.ndarray, mean: np.ndarray) -> float:
    """``sum_i ||g_i - mean||^2 / (n_v - 1)``; zero when fewer than two rows."""
    n = per_sample.shape[0]
    if n < 2:
        return 0.0
    dev = per_sample - mean
    return float(np.sum(dev * dev) / (n - 1))


class EvalCounter:
    """Thread-safe running count of individual ``f(x, zeta_i)`` evaluations."""

    def __init__(self):
        self._total = 0
        self._lock = threading.Lock()

    def add(self, n: int):
        with self._lock:
            self._total += int(n)

    @property
    def total(self) -> int:
        return self._total


class GaussianNoise:
    """``zeta ~ N(0, sigma^2 I_p)`` realized by the counter-based generator.

    Requests for a contiguous id range are served from a memoized block of
    ``prefetch`` consecutive ids; the values are the same either way.
    """

    def __init__(self, sigma: float, master_seed: int = 0, prefetch: int = 4096):
        self.sigma = float(sigma)
        self.master_seed = int(master_seed)
        self.prefetch = prefetch
        self._block_start = 0
        self._block = None

    def _draw(self, ids, p: int) -> np.ndarray:
        return self.sigma * standard_normal(self.master_seed, ids, p)

    def __call__(self, ids, p: int) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        if self.sigma == 0:
            return np.zeros((ids.size, p))
        lo, n = int(ids[0]), ids.size
        contiguous = int(ids[-1]) - lo + 1 == n and (n < 3 or bool(np.all(ids[1:] > ids[:-1])))
        if self.prefetch <= 0 or not contiguous:
            return self._draw(ids, p)
        block = self._block
        start = self._block_start
        if block is None or block.shape[1] != p or lo < start or lo + n > start + block.shape[0]:
            size = max(self.prefetch, n)
            block = self._draw(np.arange(lo, lo + size), p)
            self._block, self._block_start, start = block, lo, lo
        return block[lo - start : lo - start + n]


class TableNoise:
    """Noise looked up from a fixed table: sample id ``i`` gets row ``i``."""

    def __init__(self, table):
        self.table = np.atleast_2d(np.asarray(table, dtype=float))

    def __call__(self, ids, p: int) -> np.ndarray:
        rows = self.table[np.atleast_1d(ids)]
        if rows.shape[1] != p:
            raise ValueError(f"noise table has width {rows.shape[1]}, expected {p}")
        return rows


def realize_noise(sample: CrnSample, p: int, sigma: float, master_seed: int) -> np.ndarray:
    return GaussianNoise(sigma, master_seed)(sample.id, p)[0]


class CrnOracle:
    """Stochastic zero-order oracle for ``problem`` with evaluation accounting.

    Parameters
    ----------
    problem
        Anything with ``d``, ``p``, ``sigma``, ``residuals(X)`` and
        ``combine(phi, noise)``; normally a :class:`fdqn.problems.Problem`.
    master_seed
        Seed of the Gaussian noise stream. Ignored when ``noise`` is given.
    noise
        Optional noise source ``(ids, p) -> (len(ids), p)`` replacing the
        Gaussian one.
    """

    def __init__(self, problem, master_seed: int = 0, noise=None):
        self.problem = problem
        self.noise = noise if noise is not None else GaussianNoise(problem.sigma, master_seed)
        self.counter = EvalCounter()

    @property
    def evals(self) -> int:
        return self.counter.total

    def values(self, points, ids) -> np.ndarray:
        """``f(point_k, zeta_i)`` as an ``(len(ids), len(points))`` array.

        Counts ``len(ids) * len(points)`` evaluations, even when the result is
        rejected as non-finite.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        with np.errstate(over="ignore", invalid="ignore"):
            phi = self.problem.residuals(points)
        return self.values_from_residuals(phi, ids)

    def values_from_residuals(self, phi, ids, check: bool = True) -> np.ndarray:
        """Like :meth:`values` for points whose ``(n, p)`` residuals are known.

        With ``check=False`` non-finite entries are returned instead of raising.
        """
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        self.counter.add(phi.shape[0] * ids.size)
        if check and not np.all(np.isfinite(phi)):
            raise EvaluationError("non-finite residuals")
        step = max(1, _BLOCK // phi.shape[0])
        out = np.empty((ids.size, phi.shape[0]))
        with np.errstate(over="ignore", invalid="ignore"):
            for lo in range(0, ids.size, step):
                chunk = ids[lo : lo + step]
                out[lo : lo + step] = self.problem.combine(phi, self.noise(chunk, self.problem.p))
        if check and not np.all(np.isfinite(out)):
            raise EvaluationError("non-finite function value")
        return out

    def fd_residuals(self, X, nu: float) -> np.ndarray:
        """Residuals on the forward-difference stencil of each row of ``X``: ``(n, d + 1, p)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        with np.errstate(over="ignore", invalid="ignore"):
            if hasattr(self.problem, "fd_residuals"):
                return self.problem.fd_residuals(X, nu)
            d = X.shape[1]
            points = X[:, None, :] + np.vstack([np.zeros(d), nu * np.eye(d)])[None]
            return self.problem.residuals(points.reshape(-1, d)).reshape(X.shape[0], d + 1, -1)

    def fd_stencil_gradients(self, phi_stencil, ids, nu: float):
        """Per-sample FD gradients and base values from ``(r, d + 1, p)`` stencil residuals.

        Returns ``(grads, base)`` shaped ``(m, r, d)`` and ``(m, r)``, possibly
        non-finite. Counts ``m r (d + 1)`` evaluations.
        """
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        r, d1, p = phi_stencil.shape
        if not hasattr(self.problem, "fd_combine"):
            vals = self.values_from_residuals(phi_stencil.reshape(-1, p), ids, check=False).reshape(ids.size, r, d1)
            return (vals[:, :, 1:] - vals[:, :, :1]) / nu, vals[:, :, 0]
        self.counter.add(ids.size * r * d1)
        step = max(1, _BLOCK // (r * d1))
        if ids.size <= step:
            return self.problem.fd_combine(phi_stencil, self.noise(ids, p), nu)
        parts = [
            self.problem.fd_combine(phi_stencil, self.noise(ids[lo : lo + step], p), nu)
            for lo in range(0, ids.size, step)
        ]
        return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])

    def eval_f(self, x, sample: CrnSample) -> float:
        return float(self.values(x, [sample.id])[0, 0])

    def eval_batch_mean(self, x, batch: Batch) -> float:
        return float(np.mean(self.values(x, batch.ids)[:, 0]))

    def fd_gradient_sample(self, x, nu: float, sample: CrnSample) -> np.ndarray:
        return self.fd_gradient_batch(x, nu, Batch.of([sample.id])).batch_gradient

    def fd_gradient_batch(self, x, nu: float, batch: Batch, base_values: Optional[np.ndarray] = None) -> GradientEstimate:
        """Forward-difference gradient averaged over the batch.

        Costs ``(d + 1) |S|`` evaluations, or ``d |S|`` when the per-sample
        values at ``x`` are supplied as ``base_values`` (same batch order).
        """
        if not nu > 0:
            raise ValueError(f"finite-difference parameter must be positive, got {nu}")
        x = np.asarray(x, dtype=float)
        before = self.evals
        phi = self.fd_residuals(x, nu)
        if not np.all(np.isfinite(phi)):
            raise EvaluationError("non-finite residuals")
        if base_values is None:
            grads, base = self.fd_stencil_gradients(phi, batch.ids, nu)
            per_sample, base = grads[:, 0, :], base[:, 0]
            if not (np.all(np.isfinite(per_sample)) and np.all(np.isfinite(base))):
                raise EvaluationError("non-finite function value")
        else:
            base = np.asarray(base_values, dtype=float)
            if base.shape != (len(batch),):
                raise ValueError("base_values must hold one value per batch sample")
            ups = self.values_from_residuals(phi[0, 1:], batch.ids)
            per_sample = (ups - base[:, None]) / nu
        g = per_sample.mean(axis=0)
        subset = per_sample[: batch.variance_subset_size]
        return GradientEstimate(
            batch_gradient=g,
            per_sample_gradients=subset,
            sample_variance=sample_variance(subset, g),
            evals_used=self.evals - before,
            base_values=base,
        )
