"""Adaptive-sampling FD quasi-Newton solvers and the FD stochastic-gradient baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .lbfgs import CurvaturePairError, LbfgsMemory
from .linesearch import LineSearchConfig, backtrack, initial_steplength
from .oracle import CrnOracle, EvaluationError
from .problems import Problem, true_objective
from .sampling import SampleIds, SampleSizePolicy, first_batch, ipqn_test, next_batch, norm_test

METHODS = ("fd_norm", "fd_ipqn", "fd_sg")
LS_FAILURE_POLICIES = ("stop", "resample")
STOP_REASONS = ("budget", "line_search_failure", "gradient_degenerate", "max_iters", "divergence")
SG_ALPHA_GRID = tuple(2.0**j for j in range(-20, 11))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = "fd_norm"
    nu: float = 1e-8
    policy: SampleSizePolicy = field(default_factory=SampleSizePolicy)
    ls: LineSearchConfig = field(default_factory=LineSearchConfig)
    lbfgs_m: int = 10
    beta: float = 1e-2
    gamma_init: float = 1.0
    alpha_max: float = 1.0
    max_evals: int = 10_000_000
    max_iters: Optional[int] = None
    master_seed: int = 0
    sg_alpha: Optional[float] = None
    ls_failure_policy: str = "stop"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.nu > 0:
            raise ConfigError(f"nu must be positive, got {self.nu}")
        if self.lbfgs_m < 1:
            raise ConfigError(f"lbfgs_m must be positive, got {self.lbfgs_m}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if not self.alpha_max > 0:
            raise ConfigError(f"alpha_max must be positive, got {self.alpha_max}")
        if self.max_evals < 1:
            raise ConfigError(f"max_evals must be positive, got {self.max_evals}")
        if self.ls_failure_policy not in LS_FAILURE_POLICIES:
            raise ConfigError(f"unknown ls_failure_policy {self.ls_failure_policy!r}")
        if self.method == "fd_sg" and not (self.sg_alpha is not None and self.sg_alpha > 0):
            raise ConfigError("fd_sg needs a positive sg_alpha")

    @property
    def test_kind(self) -> str:
        if self.method == "fd_sg" or self.policy.test_kind == "fixed":
            return "fixed"
        return "norm" if self.method == "fd_norm" else "ipqn"


@dataclass(slots=True)
class IterationRecord:
    """One iteration. ``f_sampled``/``f_true`` are taken at the iterate the
    iteration ends on; ``f_true`` and ``err`` come from the noise-free side
    channel and are never seen by the solver."""

    k: int
    batch_size: int
    alpha: float
    f_sampled: float
    f_true: float
    err: float
    grad_norm_est: float
    test_passed: bool
    ls_status: str
    cum_evals: int
    # in-memory only
    trials: int = 0
    f_start: float = math.nan
    slope: float = math.nan
    curvature: str = "none"  # accepted | skipped | none
    required_size: int = 0
    gradient_ids: tuple = ()  # (first id, count) of the gradient batch
    curvature_ids: tuple = ()  # same for the y-gradient batch


CSV_FIELDS = (
    "k",
    "batch_size",
    "alpha",
    "f_sampled",
    "f_true",
    "err",
    "grad_norm_est",
    "test_passed",
    "ls_status",
    "cum_evals",
)


@dataclass
class RunResult:
    records: list
    stop_reason: str
    final_x: np.ndarray
    evals: int = 0
    f_star: Optional[float] = None

    @property
    def final_f_true(self) -> float:
        return self.records[-1].f_true if self.records else math.nan

    @property
    def final_err(self) -> float:
        return self.records[-1].err if self.records else math.nan


def _id_span(batch):
    return (int(batch.ids[0]), len(batch))


def run(problem: Problem, x0, cfg: SolverConfig, f_star: Optional[float] = None) -> RunResult:
    if cfg.method == "fd_sg":
        return run_fd_sg(problem, x0, cfg, f_star=f_star)
    return run_adaptive(problem, x0, cfg, f_star=f_star)


def run_adaptive(problem: Problem, x0, cfg: SolverConfig, f_star: Optional[float] = None) -> RunResult:
    """Adaptive-sample-size FD L-BFGS (FD-Norm / FD-IPQN).

    Each iteration: FD gradient on a fresh batch; quasi-Newton direction;
    sample-size test (its verdict sizes the *next* batch); backtracking from
    the variance-shrunk initial step on the same batch; curvature pair from
    the FD gradient at the new point on that same batch.
    """
    if cfg.method not in ("fd_norm", "fd_ipqn"):
        raise ConfigError(f"run_adaptive needs fd_norm or fd_ipqn, got {cfg.method!r}")
    f_star = problem.f_star if f_star is None else f_star
    d = problem.d
    x = np.array(x0, dtype=float)
    if x.shape != (d,):
        raise ConfigError(f"x0 has shape {x.shape}, expected ({d},)")
    oracle = CrnOracle(problem, cfg.master_seed)
    memory = LbfgsMemory(d, cfg.lbfgs_m, cfg.gamma_init)
    ids = SampleIds()
    policy = cfg.policy
    batch = first_batch(policy, ids)
    records = []
    stop = "max_iters"
    k = 0
    while cfg.max_iters is None or k < cfg.max_iters:
        n = len(batch)
        if oracle.evals + (d + 1) * n > cfg.max_evals:
            stop = "budget"
            break
        try:
            est = oracle.fd_gradient_batch(x, cfg.nu, batch)
        except EvaluationError:
            stop = "divergence"
            break
        g = est.batch_gradient
        f0 = est.sampled_value
        g_norm = float(np.linalg.norm(g))
        hg = memory.apply_h(g)

        if cfg.test_kind == "norm":
            outcome = norm_test(est, n, policy.theta, policy.s_max)
        elif cfg.test_kind == "ipqn":
            outcome = ipqn_test(est, hg, memory.apply_h(hg), n, policy.theta, policy.s_max)
        else:
            outcome = None

        rec = IterationRecord(
            k=k,
            batch_size=n,
            alpha=0.0,
            f_sampled=f0,
            f_true=math.nan,
            err=math.nan,
            grad_norm_est=g_norm,
            test_passed=True if outcome is None else outcome.passed,
            ls_status="none",
            cum_evals=0,
            f_start=f0,
            required_size=n if outcome is None else outcome.required_size,
            gradient_ids=_id_span(batch),
        )

        if g_norm == 0:
            stop = "gradient_degenerate"
            _finish(rec, problem, x, f_star, oracle)
            records.append(rec)
            break

        alpha_hat, _ = initial_steplength(est, n)
        ls = backtrack(oracle, x, hg, g, batch, min(alpha_hat, cfg.alpha_max), cfg.ls, f0=f0)
        rec.trials = ls.trial_count
        rec.slope = ls.slope
        rec.ls_status = ls.status

        if ls.accepted:
            x_new = x - ls.alpha * hg
            rec.alpha = ls.alpha
            rec.f_sampled = ls.f_new
            s = x_new - x
            if np.any(s != 0):
                rec.curvature_ids = _id_span(batch)
                try:
                    g_new = oracle.fd_gradient_batch(x_new, cfg.nu, batch, base_values=ls.values).batch_gradient
                    stored = memory.try_update(s, g_new - g, cfg.beta)
                except (EvaluationError, CurvaturePairError):
                    stored = False
                rec.curvature = "accepted" if stored else "skipped"
            x = x_new
        _finish(rec, problem, x, f_star, oracle)
        records.append(rec)
        k += 1

        if not ls.accepted and cfg.ls_failure_policy == "stop":
            stop = "line_search_failure"
            break
        if outcome is None:
            batch = next_batch(policy, batch, _PASS, ids)
        else:
            batch = next_batch(policy, batch, outcome, ids)

    return RunResult(records=records, stop_reason=stop, final_x=x, evals=oracle.evals, f_star=f_star)


class _Pass:
    passed = True
    required_size = 0


_PASS = _Pass()


def _finish(rec: IterationRecord, problem, x, f_star, oracle):
    with np.errstate(over="ignore", invalid="ignore"):
        rec.f_true = true_objective(problem, x)
    rec.err = rec.f_true - f_star if f_star is not None else math.nan
    rec.cum_evals = oracle.evals


def run_fd_sg(problem: Problem, x0, cfg: SolverConfig, f_star: Optional[float] = None) -> RunResult:
    """Fixed-batch, fixed-step FD gradient descent ``x <- x - alpha g_S``."""
    if cfg.method != "fd_sg":
        raise ConfigError(f"run_fd_sg needs method fd_sg, got {cfg.method!r}")
    return _fd_sg_lockstep(problem, x0, [cfg.sg_alpha], cfg, f_star)[0]


def _fd_sg_lockstep(problem, x0, alphas, cfg: SolverConfig, f_star=None, keep_records: bool = True) -> list:
    """Run FD-SG for several steplengths side by side.

    All runs draw the same batches (same seed, fixed batch size), so each
    iteration's noise and residual work is shared. Every run's result is the
    one a solo run would produce.
    """
    f_star = problem.f_star if f_star is None else f_star
    d = problem.d
    n = cfg.policy.s0
    nu = cfg.nu
    alphas = np.asarray(alphas, dtype=float)
    R = alphas.size
    X = np.tile(np.asarray(x0, dtype=float), (R, 1))
    if X.shape[1] != d:
        raise ConfigError(f"x0 has length {X.shape[1]}, expected {d}")
    oracle = CrnOracle(problem, cfg.master_seed)
    ids = SampleIds()
    per_iter = (d + 1) * n
    n_iter = cfg.max_evals // per_iter
    if cfg.max_iters is not None:
        n_iter = min(n_iter, cfg.max_iters)
    rows_kept = n_iter if keep_records else 1
    # telemetry buffers, one slot per iteration (or just the latest)
    f_s = np.full((R, rows_kept), np.nan)
    f_t = np.full((R, rows_kept), np.nan)
    g_n = np.full((R, rows_kept), np.nan)
    done = np.zeros(R, dtype=np.int64)  # completed iterations per row
    first_ids = np.empty(max(rows_kept, 1), dtype=np.int64)
    stops = ["budget"] * R
    active = np.arange(R)
    inv_n = 1.0 / n
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_iter):
            batch_ids = ids.take(n)
            phi = oracle.fd_residuals(X[active], nu)
            grads, base = oracle.fd_stencil_gradients(phi, batch_ids, nu)
            G = grads.sum(axis=0) * inv_n
            fs = base.sum(axis=0) * inv_n
            X_new = X[active] - alphas[active, None] * G
            phi_new = problem.residuals(X_new)
            ft = np.einsum("ij,ij->i", phi_new, phi_new)
            ok = np.isfinite(X_new).all(axis=1) & np.isfinite(ft) & np.isfinite(fs)
            slot = k if keep_records else 0
            first_ids[slot] = batch_ids[0]
            if active.size == R and ok.all():
                # fast path: nothing has diverged
                X = X_new
                f_s[:, slot] = fs
                f_t[:, slot] = ft
                g_n[:, slot] = np.sqrt(np.einsum("ij,ij->i", G, G))
                continue
            done[active] = k
            good = active[ok]
            X[good] = X_new[ok]
            f_s[good, slot] = fs[ok]
            f_t[good, slot] = ft[ok]
            g_n[good, slot] = np.sqrt(np.einsum("ij,ij->i", G[ok], G[ok]))
            done[good] = k + 1
            for r in active[~ok]:
                stops[r] = "divergence"
            active = good
            if active.size == 0:
                break
        else:
            done[active] = n_iter
    if cfg.max_iters is not None and n_iter == cfg.max_iters:
        for r in active:
            stops[r] = "max_iters"
    results = []
    for r in range(R):
        m = int(done[r])
        ks = range(m) if keep_records else range(max(m - 1, 0), m)
        recs = []
        for k in ks:
            slot = k if keep_records else 0
            ft = float(f_t[r, slot])
            recs.append(
                IterationRecord(
                    k=k,
                    batch_size=n,
                    alpha=float(alphas[r]),
                    f_sampled=float(f_s[r, slot]),
                    f_true=ft,
                    err=ft - f_star if f_star is not None else math.nan,
                    grad_norm_est=float(g_n[r, slot]),
                    test_passed=True,
                    ls_status="none",
                    cum_evals=(k + 1) * per_iter,
                    f_start=float(f_s[r, slot]),
                    required_size=n,
                    gradient_ids=(int(first_ids[slot]), n),
                )
            )
        results.append(
            RunResult(records=recs, stop_reason=stops[r], final_x=X[r].copy(), evals=m * per_iter, f_star=f_star)
        )
    return results


@dataclass
class TuningResult:
    best_alpha: float
    alphas: list
    results: list  # RunResult per alpha (final record only unless keep_records)

    def final_f_true(self) -> list:
        out = []
        for res in self.results:
            ok = res.stop_reason != "divergence" and res.records
            out.append(res.final_f_true if ok else math.inf)
        return out


class TuningError(RuntimeError):
    pass


def tune_fd_sg(
    problem: Problem,
    x0,
    base_cfg: SolverConfig,
    budget_per_trial: int,
    alphas=SG_ALPHA_GRID,
    f_star: Optional[float] = None,
    keep_records: bool = False,
) -> TuningResult:
    """Pick the constant FD-SG steplength with the lowest final true objective.

    Every candidate runs with the same master seed and budget. Diverged runs
    are out of the running; ties go to the smaller steplength.
    """
    if budget_per_trial < (problem.d + 1) * base_cfg.policy.s0:
        raise ConfigError("budget_per_trial is smaller than one gradient estimate")
    cfg = replace(base_cfg, method="fd_sg", sg_alpha=float(alphas[0]), max_evals=int(budget_per_trial))
    results = _fd_sg_lockstep(problem, x0, alphas, cfg, f_star, keep_records=keep_records)
    tuning = TuningResult(best_alpha=math.nan, alphas=[float(a) for a in alphas], results=results)
    finals = tuning.final_f_true()
    best = None
    for a, f in sorted(zip(tuning.alphas, finals)):
        if math.isfinite(f) and (best is None or f < best[1]):
            best = (a, f)
    if best is None:
        raise TuningError(
            f"every FD-SG steplength diverged on {problem.name} "
            f"(d={problem.d}, p={problem.p}, noise={problem.noise_model}, sigma={problem.sigma})"
        )
    tuning.best_alpha = best[0]
    return tuning
