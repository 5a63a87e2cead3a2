"""Log-space combinatorics for the Poisson-Dirichlet (Pitman-Yor) process.

Generalised Stirling numbers follow the recurrence

    S^{n+1}_{m,a} = S^n_{m-1,a} + (n - m a) S^n_{m,a},   S^0_{0,a} = 1,

so that, for a CRP with discount ``a`` and strength ``b``, the probability
that ``n`` customers occupy ``m`` tables is ``(b|a)_m / (b)_n * S^n_{m,a}``.
"""
from __future__ import annotations

import threading

import numpy as np
from scipy.special import gammaln


class StirlingCache:
    """Table of ``log S^n_{m,a}`` for ``0 <= m <= n <= n_max``; ``-inf`` encodes zero.

    Rows are appended on demand (capacity doubles). Existing rows are never
    rewritten, so values read earlier stay valid. Growth holds a lock;
    reads of already-built rows need none.
    """

    def __init__(self, a: float, n_max: int = 16):
        if not 0.0 <= a < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        self.a = float(a)
        self._lock = threading.Lock()
        self._table = np.full((1, 1), -np.inf)
        self._table[0, 0] = 0.0
        self._built = 0
        self.ensure(n_max)

    @property
    def n_max(self) -> int:
        return self._built

    @property
    def table(self) -> np.ndarray:
        """Read-only view of rows ``0..n_max``."""
        view = self._table[: self._built + 1, : self._built + 1]
        view.flags.writeable = False
        return view

    def ensure(self, n: int) -> None:
        if n <= self._built:
            return
        with self._lock:
            if n <= self._built:
                return
            cap = self._table.shape[0] - 1
            if n > cap:
                new_cap = max(n, 2 * cap, 1)
                grown = np.full((new_cap + 1, new_cap + 1), -np.inf)
                grown[: cap + 1, : cap + 1] = self._table
                self._table = grown
                cap = new_cap
            # Fill up to the full capacity so repeated small requests stay amortised.
            T, a = self._table, self.a
            for row in range(self._built, cap):
                m = np.arange(0, row + 2)
                prev = T[row, : row + 2]
                shifted = np.concatenate(([-np.inf], T[row, : row + 1]))
                coef = row - m * a
                with np.errstate(divide="ignore"):
                    stay = np.where(coef > 0, np.log(np.where(coef > 0, coef, 1.0)) + prev, -np.inf)
                T[row + 1, : row + 2] = np.logaddexp(shifted, stay)
            self._built = cap

    def log_s(self, n: int, m: int) -> float:
        if m < 0 or m > n:
            return -np.inf
        self.ensure(n)
        return float(self._table[n, m])

    def ratio(self, n: int, m_num: int, m_den: int) -> float:
        """``S^{n+1}_{m_num} / S^n_{m_den}`` evaluated in log space."""
        return float(np.exp(self.log_s(n + 1, m_num) - self.log_s(n, m_den)))


def log_stirling(cache: StirlingCache, n: int, m: int) -> float:
    return cache.log_s(n, m)


def log_pochhammer(b: float, a: float, n: int) -> float:
    """``log (b|a)_n = sum_{i<n} log(b + i a)``; ``(b)_n`` is the case ``a = 1``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return 0.0
    factors = b + a * np.arange(n)
    if np.any(factors <= 0):
        raise ValueError("Pochhammer symbol has a non-positive factor")
    return float(np.sum(np.log(factors)))


def log_pochhammer_table(b: float, a: float, n_max: int) -> np.ndarray:
    """``log (b|a)_n`` for ``n = 0..n_max`` as a cumulative sum."""
    factors = b + a * np.arange(n_max)
    if np.any(factors <= 0):
        raise ValueError("Pochhammer symbol has a non-positive factor")
    return np.concatenate(([0.0], np.cumsum(np.log(factors))))


def log_beta_vec(params) -> float:
    """Log of the multivariate Beta function, the Dirichlet normaliser."""
    x = np.asarray(params, dtype=float)
    if np.any(x <= 0):
        raise ValueError("Beta function arguments must be positive")
    return float(np.sum(gammaln(x)) - gammaln(np.sum(x)))


def log_beta_rows(params: np.ndarray) -> np.ndarray:
    """Row-wise :func:`log_beta_vec` of a 2-d array."""
    x = np.asarray(params, dtype=float)
    return gammaln(x).sum(axis=-1) - gammaln(x.sum(axis=-1))


def crp_table_count_pmf(cache: StirlingCache, b: float, n: int) -> np.ndarray:
    """Distribution of the number of occupied tables after ``n`` customers."""
    a = cache.a
    logs = np.array([cache.log_s(n, m) for m in range(n + 1)])
    num = np.array([log_pochhammer(b, a, m) for m in range(n + 1)])
    return np.exp(logs + num - log_pochhammer(b, 1.0, n))
