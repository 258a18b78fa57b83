"""Limited-memory BFGS inverse-Hessian operator.

H is never formed. Products ``H v`` use the two-loop recursion over the
stored curvature pairs with ``H0 = gamma I``, where gamma is the last pair's
``y^T s / y^T y`` (or ``gamma_init`` while the memory is empty).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class CurvaturePairError(ValueError):
    """A curvature pair with non-finite entries was offered."""


@dataclass(frozen=True)
class CurvaturePair:
    s: np.ndarray
    y: np.ndarray
    rho: float


class LbfgsMemory:
    """Ring buffer of at most ``m`` curvature pairs, oldest first."""

    def __init__(self, d: int, m: int = 10, gamma_init: float = 1.0):
        if m < 1:
            raise ValueError(f"memory size must be positive, got {m}")
        if not gamma_init > 0:
            raise ValueError(f"gamma_init must be positive, got {gamma_init}")
        self.d = d
        self.m = m
        self.gamma_init = float(gamma_init)
        self.gamma = float(gamma_init)
        self.pairs: deque[CurvaturePair] = deque(maxlen=m)

    def __len__(self):
        return len(self.pairs)

    def clear(self):
        self.pairs.clear()
        self.gamma = self.gamma_init

    def apply_h(self, v) -> np.ndarray:
        q = np.array(v, dtype=float)
        alphas = []
        for pair in reversed(self.pairs):
            a = pair.rho * (pair.s @ q)
            q -= a * pair.y
            alphas.append(a)
        r = self.gamma * q
        for pair, a in zip(self.pairs, reversed(alphas)):
            b = pair.rho * (pair.y @ r)
            r += (a - b) * pair.s
        return r

    def apply_h_squared(self, v) -> np.ndarray:
        return self.apply_h(self.apply_h(v))

    def try_update(self, s, y, beta: float = 1e-2) -> bool:
        """Store ``(s, y)`` if ``y^T s > beta ||s||^2``; return whether it was stored.

        Raises
        ------
        CurvaturePairError
            If ``s`` or ``y`` contain non-finite values.
        """
        s = np.array(s, dtype=float)
        y = np.array(y, dtype=float)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(y))):
            raise CurvaturePairError("curvature pair contains non-finite values")
        ys = float(y @ s)
        if not ys > beta * float(s @ s):
            return False
        yy = float(y @ y)
        self.pairs.append(CurvaturePair(s=s, y=y, rho=1.0 / ys))
        self.gamma = ys / yy
        return True

    def dense(self) -> np.ndarray:
        """Explicit H (for inspection and tests; O(d^2) memory)."""
        return np.column_stack([self.apply_h(e) for e in np.eye(self.d)])


def apply_h(memory: LbfgsMemory, v) -> np.ndarray:
    return memory.apply_h(v)


def apply_h_squared(memory: LbfgsMemory, v) -> np.ndarray:
    return memory.apply_h_squared(v)


def try_update(memory: LbfgsMemory, s, y, beta: float = 1e-2) -> bool:
    return memory.try_update(s, y, beta)
