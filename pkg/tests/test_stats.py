import math

import numpy as np
import pytest
import scipy.stats

from reglab.experiments.stats import (
    ks_critical_value,
    ks_pvalue,
    ks_statistic,
    proportion_standard_error,
    standard_error,
    strictly_decreasing,
    symmetric_mixture_cdf,
)


def test_single_sample_at_the_median():
    assert ks_statistic([0.0], scipy.stats.norm.cdf) == pytest.approx(0.5)


def test_ks_statistic_matches_scipy():
    samples = np.random.default_rng(1).normal(0.2, 1.0, size=500)
    expected = scipy.stats.kstest(samples, "norm").statistic
    assert ks_statistic(samples, scipy.stats.norm.cdf) == pytest.approx(expected, abs=1e-12)


def test_ks_accepts_the_true_mixture():
    rng = np.random.default_rng(7)
    R = 3.0
    samples = R * rng.choice([-1.0, 1.0], size=4000) + rng.standard_normal(4000)
    stat = ks_statistic(samples, symmetric_mixture_cdf(R))
    assert stat <= 2 * ks_critical_value(4000)
    assert 0.0 < ks_pvalue(stat, 4000) <= 1.0


def test_ks_rejects_a_single_component():
    samples = 3.0 + np.random.default_rng(7).standard_normal(4000)
    stat = ks_statistic(samples, symmetric_mixture_cdf(3.0))
    assert stat > 0.4
    assert ks_pvalue(stat, 4000) < 1e-6


def test_ks_needs_samples():
    with pytest.raises(ValueError):
        ks_statistic([], scipy.stats.norm.cdf)


def test_critical_value():
    assert ks_critical_value(10_000) == pytest.approx(0.0136)


def test_symmetric_mixture_cdf():
    cdf = symmetric_mixture_cdf(2.0)
    assert cdf(0.0) == pytest.approx(0.5)
    x = np.array([-1.0, 0.5, 4.0])
    np.testing.assert_allclose(cdf(x) + cdf(-x), 1.0)


def test_standard_errors():
    assert standard_error([1.0, 3.0]) == pytest.approx(math.sqrt(2.0) / math.sqrt(2.0))
    assert math.isnan(standard_error([1.0]))
    assert proportion_standard_error(0.5, 100) == pytest.approx(0.05)


def test_strictly_decreasing():
    assert strictly_decreasing([3.0, 2.0, 1.0])
    assert not strictly_decreasing([3.0, 3.0, 1.0])
    assert strictly_decreasing([1.0])
