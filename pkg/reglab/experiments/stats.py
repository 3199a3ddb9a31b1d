"""Goodness-of-fit and summary statistics used by the experiments."""

import math
from typing import Callable, Sequence

import numpy as np
from scipy import stats

# Two-sided 95% asymptotic Kolmogorov critical constant.
KS_CRITICAL_95 = 1.36


def ks_statistic(samples: Sequence[float], cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """
    Two-sided one-sample Kolmogorov-Smirnov distance
    max_i max(i/n - F(x_(i)), F(x_(i)) - (i-1)/n) over the sorted sample.
    """
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    n = s.size
    if n == 0:
        raise ValueError("ks_statistic needs at least one sample")
    tcdf = np.asarray(cdf(s), dtype=float)
    d_plus = np.max(np.arange(1, n + 1) / n - tcdf)
    d_minus = np.max(tcdf - np.arange(0, n) / n)
    return float(max(d_plus, d_minus))


def ks_pvalue(statistic: float, n: int) -> float:
    return float(stats.kstwo.sf(statistic, n))


def ks_critical_value(n: int) -> float:
    return KS_CRITICAL_95 / math.sqrt(n)


def symmetric_mixture_cdf(R: float) -> Callable[[np.ndarray], np.ndarray]:
    """CDF of 1/2 N(R, 1) + 1/2 N(-R, 1)."""

    def cdf(x):
        return 0.5 * (stats.norm.cdf(x - R) + stats.norm.cdf(x + R))

    return cdf


def standard_error(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return math.nan
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def proportion_standard_error(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n)


def strictly_decreasing(values: Sequence[float]) -> bool:
    values = list(values)
    return all(b < a for a, b in zip(values, values[1:]))
