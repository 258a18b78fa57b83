"""Stochastic nonlinear least-squares test problems.

A problem is a residual map ``phi: R^d -> R^p`` together with a noise model.
Realizations are

    abs:  f(x, z) = sum_j (phi_j(x) + z_j)^2 - p sigma^2
    rel:  f(x, z) = sum_j phi_j(x)^2 (1 + z_j)^2 / (1 + sigma^2)

with ``z ~ N(0, sigma^2 I_p)``, so both have expectation ``sum_j phi_j(x)^2``.
"""

from __future__ import annotations

import warnings
from functools import lru_cache
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from numba import njit

NOISE_MODELS = ("abs", "rel")


@dataclass(frozen=True)
class Problem:
    """Residual map plus noise model.

    ``residuals`` maps an ``(n, d)`` array of points to an ``(n, p)`` array.
    ``jacobian`` (optional) maps one point to the ``(p, d)`` Jacobian.
    """

    name: str
    d: int
    p: int
    residuals: Callable[[np.ndarray], np.ndarray]
    noise_model: str = "abs"
    sigma: float = 0.0
    x_standard: Optional[np.ndarray] = None
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    f_star: Optional[float] = None
    stencil: Optional[Callable[[np.ndarray, float], np.ndarray]] = None

    def __post_init__(self):
        if self.d < 1 or self.p < 1:
            raise ValueError(f"need d >= 1 and p >= 1, got d={self.d}, p={self.p}")
        if self.noise_model not in NOISE_MODELS:
            raise ValueError(f"unknown noise model {self.noise_model!r}; expected one of {NOISE_MODELS}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma!r}")

    def phi(self, x) -> np.ndarray:
        return self.residuals(np.atleast_2d(np.asarray(x, dtype=float)))[0]

    def fd_combine(self, phi_stencil: np.ndarray, noise: np.ndarray, nu: float):
        """Per-sample forward differences on ``(r, d + 1, p)`` stencil residuals.

        Returns ``(grads, base)`` of shapes ``(m, r, d)`` and ``(m, r)``; the
        values are bitwise those :meth:`combine` gives.
        """
        return _fd_combine(
            np.ascontiguousarray(phi_stencil, dtype=float),
            np.ascontiguousarray(noise, dtype=float),
            self.sigma,
            self.noise_model == "rel",
            float(nu),
        )

    def fd_residuals(self, X, nu: float) -> np.ndarray:
        """Residuals at each row of ``X`` and at ``row + nu e_i``, shape ``(n, d + 1, p)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.stencil is not None:
            return self.stencil(X, nu)
        points = X[:, None, :] + np.vstack([np.zeros(self.d), nu * np.eye(self.d)])[None]
        return self.residuals(points.reshape(-1, self.d)).reshape(X.shape[0], self.d + 1, self.p)

    def with_sigma(self, sigma: float) -> "Problem":
        return replace(self, sigma=float(sigma))

    def combine(self, phi: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """Function values for every (point, sample) pair.

        Parameters
        ----------
        phi : (n, p) residuals at n points.
        noise : (m, p) noise realizations.

        Returns
        -------
        (m, n) array, entry ``[i, k]`` = f(point k, sample i).
        """
        return _combine(
            np.ascontiguousarray(phi, dtype=float),
            np.ascontiguousarray(noise, dtype=float),
            self.sigma,
            self.noise_model == "rel",
        )


@njit(cache=True)
def _value(phi, z, sigma, relative):
    acc = 0.0
    if relative:
        for j in range(phi.size):
            v = phi[j] * (1.0 + z[j])
            acc += v * v
        return acc / (1.0 + sigma * sigma)
    for j in range(phi.size):
        v = phi[j] + z[j]
        acc += v * v
    return acc - phi.size * sigma * sigma


@njit(cache=True)
def _combine(phi, noise, sigma, relative):
    n = phi.shape[0]
    m = noise.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for k in range(n):
            out[i, k] = _value(phi[k], noise[i], sigma, relative)
    return out


@njit(cache=True)
def _fd_combine(phi, noise, sigma, relative, nu):
    # phi: (r, d + 1, p) stencil residuals -> per-sample FD gradients (m, r, d), base values (m, r)
    r, d1, _ = phi.shape
    m = noise.shape[0]
    grads = np.empty((m, r, d1 - 1))
    base = np.empty((m, r))
    for i in range(m):
        for k in range(r):
            f0 = _value(phi[k, 0], noise[i], sigma, relative)
            base[i, k] = f0
            for j in range(d1 - 1):
                grads[i, k, j] = (_value(phi[k, j + 1], noise[i], sigma, relative) - f0) / nu
    return grads, base


def true_objective(problem: Problem, x) -> float:
    """Noise-free objective ``sum_j phi_j(x)^2``; never counted as an evaluation."""
    phi = problem.phi(x)
    return float(phi @ phi)


def true_gradient(problem: Problem, x) -> np.ndarray:
    if problem.jacobian is None:
        raise ValueError(f"problem {problem.name!r} has no analytic Jacobian")
    x = np.asarray(x, dtype=float)
    return 2.0 * problem.jacobian(x).T @ problem.phi(x)


# --- Chebyquad -------------------------------------------------------------


@lru_cache(maxsize=None)
def _shifted_integrals(p: int) -> np.ndarray:
    j = np.arange(1, p + 1)
    out = np.zeros(p)
    even = j % 2 == 0
    out[even] = -1.0 / (j[even] ** 2 - 1.0)
    out.flags.writeable = False
    return out


@njit(cache=True)
def _chebyshev_means(X, p, shift):
    # out[k, j] = mean_i T_{j+1}(2 X[k, i] - 1) - shift[j]
    n, d = X.shape
    out = np.zeros((n, p))
    for k in range(n):
        for i in range(d):
            t = 2.0 * X[k, i] - 1.0
            prev, cur = 1.0, t
            for j in range(p):
                out[k, j] += cur
                prev, cur = cur, 2.0 * t * cur - prev
        for j in range(p):
            out[k, j] = out[k, j] / d - shift[j]
    return out


@njit(cache=True)
def _chebyshev_stencil(X, nu, p, shift):
    # row k of X -> residual means at X[k] and at X[k] + nu e_i, shape (n, d + 1, p);
    # only coordinate i moves, so each shifted point costs O(p)
    n, d = X.shape
    out = np.empty((n, d + 1, p))
    base = _chebyshev_means(X, p, shift)
    for k in range(n):
        out[k, 0] = base[k]
        for i in range(d):
            t = 2.0 * X[k, i] - 1.0
            ts = 2.0 * (X[k, i] + nu) - 1.0
            prev, cur = 1.0, t
            prevs, curs = 1.0, ts
            for j in range(p):
                out[k, i + 1, j] = base[k, j] + (curs - cur) / d
                prev, cur = cur, 2.0 * t * cur - prev
                prevs, curs = curs, 2.0 * ts * curs - prevs
    return out


def chebyquad_residuals(x, p: int) -> np.ndarray:
    """Chebyquad residuals, ``phi_j = mean_i T*_j(x_i) - int_0^1 T*_j``.

    Accepts a single point of shape ``(d,)`` or a stack ``(n, d)``.
    """
    x = np.asarray(x, dtype=float)
    out = _chebyshev_means(np.ascontiguousarray(np.atleast_2d(x)), p, _shifted_integrals(p))
    return out[0] if x.ndim == 1 else out


def chebyquad_stencil(X, nu: float, p: int) -> np.ndarray:
    """Residuals at each row of ``X`` and its forward-difference neighbours, ``(n, d + 1, p)``."""
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    return _chebyshev_stencil(X, float(nu), p, _shifted_integrals(p))


def chebyquad_jacobian(x, p: int) -> np.ndarray:
    """Analytic ``(p, d)`` Jacobian via the derivative of the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    d = x.size
    t = 2.0 * x - 1.0
    jac = np.empty((p, d))
    t_prev, t_cur = np.ones(d), t
    dt_prev, dt_cur = np.zeros(d), np.full(d, 2.0)
    for j in range(p):
        jac[j] = dt_cur / d
        t_prev, t_cur, dt_prev, dt_cur = (
            t_cur,
            2.0 * t * t_cur - t_prev,
            dt_cur,
            4.0 * t_cur + 2.0 * t * dt_cur - dt_prev,
        )
    return jac


def standard_start(d: int) -> np.ndarray:
    """Chebyquad standard starting point ``x_i = i / (d + 1)``."""
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    return np.arange(1, d + 1) / (d + 1.0)


def chebyquad(d: int = 30, p: int = 45, noise_model: str = "abs", sigma: float = 0.0) -> Problem:
    return Problem(
        name="chebyquad",
        d=d,
        p=p,
        residuals=lambda X: chebyquad_residuals(X, p),
        noise_model=noise_model,
        sigma=float(sigma),
        x_standard=standard_start(d),
        jacobian=lambda x: chebyquad_jacobian(x, p),
        stencil=lambda X, nu: chebyquad_stencil(X, nu, p),
    )


def quadratic(A, noise_model: str = "abs", sigma: float = 0.0, name: str = "quadratic") -> Problem:
    """``F(x) = x^T A x / 2`` written as residuals ``phi = R x / sqrt(2)``, ``A = R^T R``."""
    A = np.asarray(A, dtype=float)
    R = np.linalg.cholesky(A).T / np.sqrt(2.0)
    d = A.shape[0]
    return Problem(
        name=name,
        d=d,
        p=d,
        residuals=lambda X: X @ R.T,
        noise_model=noise_model,
        sigma=float(sigma),
        x_standard=np.ones(d),
        jacobian=lambda x: R,
    )


PROBLEMS = {"chebyquad": chebyquad}


def make_problem(name: str, **params) -> Problem:
    """Look up a problem factory by name."""
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known problems: {sorted(PROBLEMS)}") from None
    return factory(**params)


# --- reference optimum -----------------------------------------------------


@dataclass
class ReferenceSolution:
    x: np.ndarray
    f_star: float
    grad_inf: float
    iterations: int
    converged: bool


def solve_reference(problem: Problem, x0=None, gtol: float = 1e-10, max_iter: int = 5000, m: int = 10) -> ReferenceSolution:
    """Deterministic L-BFGS on the noise-free problem with exact gradients.

    Stops when ``||grad F||_inf <= gtol``. Starts from ``problem.x_standard``
    unless ``x0`` is given. On non-convergence the best point found is
    returned with ``converged=False`` and a warning.
    """
    from .lbfgs import LbfgsMemory
    from .linesearch import LineSearchConfig, armijo_search

    if problem.jacobian is None:
        raise ValueError(f"problem {problem.name!r} has no analytic Jacobian")
    x = np.array(problem.x_standard if x0 is None else x0, dtype=float)
    fun = lambda z: true_objective(problem, z)
    memory = LbfgsMemory(problem.d, m=m)
    cfg = LineSearchConfig(c1=1e-4, tau=0.5, max_backtracks=60)
    f = fun(x)
    g = true_gradient(problem, x)
    k = 0
    while np.max(np.abs(g)) > gtol and k < max_iter:
        direction = memory.apply_h(g)
        if g @ direction <= 0:
            memory.clear()
            direction = g.copy()
        alpha0 = 1.0 if len(memory) else min(1.0, 1.0 / np.linalg.norm(g))
        result = armijo_search(fun, x, direction, g, f, alpha0, cfg, slack=64 * np.finfo(float).eps * abs(f))
        if not result.accepted:
            if len(memory):
                memory.clear()
                continue
            break
        x_new = x - result.alpha * direction
        g_new = true_gradient(problem, x_new)
        s, y = x_new - x, g_new - g
        if np.any(s != 0):
            memory.try_update(s, y, beta=0.0)
        x, f, g = x_new, result.f_new, g_new
        k += 1
    grad_inf = float(np.max(np.abs(g)))
    converged = grad_inf <= gtol
    if not converged:
        warnings.warn(f"reference solve stopped at ||g||_inf={grad_inf:.3e} after {k} iterations", RuntimeWarning)
    return ReferenceSolution(x=x, f_star=float(f), grad_inf=grad_inf, iterations=k, converged=converged)
