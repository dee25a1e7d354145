"""Unit-root test calibration and invariances."""

from __future__ import annotations

import numpy as np
import pytest

from vesselmend.stats import (
    AdfResult,
    ConstantSeriesError,
    SeriesTooShortError,
    adf_test,
)


def test_white_noise_rejects_unit_root():
    rng = np.random.default_rng(3)
    hits = 0
    for trial in range(40):
        r = adf_test(rng.standard_normal(200))
        hits += r.p_value < 0.05
    assert hits >= 36


def test_random_walk_keeps_unit_root():
    rng = np.random.default_rng(5)
    hits = 0
    for trial in range(40):
        r = adf_test(np.cumsum(rng.standard_normal(200)))
        hits += r.p_value > 0.10
    assert hits >= 32


def test_result_fields():
    rng = np.random.default_rng(7)
    r = adf_test(rng.standard_normal(64), max_lags=3)
    assert isinstance(r, AdfResult)
    assert 0.0 <= r.p_value <= 1.0
    assert 0 <= r.lags <= 3
    assert r.n_obs < 64
    assert np.isfinite(r.statistic)


def test_affine_invariance():
    rng = np.random.default_rng(11)
    for trial in range(10):
        y = np.cumsum(rng.standard_normal(120)) + rng.standard_normal(120)
        a = adf_test(y, max_lags=4)
        b = adf_test(3.7 * y - 12.5, max_lags=4)
        assert b.statistic == pytest.approx(a.statistic, abs=1e-8)
        assert b.p_value == pytest.approx(a.p_value, abs=1e-8)
        assert b.lags == a.lags


def test_matches_reference_implementation():
    sm = pytest.importorskip("statsmodels.tsa.stattools")
    rng = np.random.default_rng(13)
    for trial in range(12):
        y = (
            np.cumsum(rng.standard_normal(150))
            if trial % 2
            else rng.standard_normal(150)
        )
        for lag in (0, 2, 5):
            got = adf_test(y, max_lags=lag)
            # pin the reference to the same fixed lag order
            ref = sm.adfuller(y, maxlag=lag, regression="c", autolag=None)
            if got.lags == lag:
                assert got.statistic == pytest.approx(ref[0], abs=1e-6)
                assert got.p_value == pytest.approx(ref[1], abs=2e-3)


def test_matches_reference_autolag_aic():
    sm = pytest.importorskip("statsmodels.tsa.stattools")
    rng = np.random.default_rng(17)
    for trial in range(8):
        y = np.cumsum(rng.standard_normal(200)) + 0.3 * rng.standard_normal(200)
        got = adf_test(y, max_lags=6)
        ref = sm.adfuller(y, maxlag=6, regression="c", autolag="AIC")
        assert got.lags == ref[2]
        assert got.statistic == pytest.approx(ref[0], abs=1e-6)


def test_short_series_raises():
    with pytest.raises(SeriesTooShortError):
        adf_test(np.arange(7, dtype=float))
    # 8 observations is the floor
    r = adf_test(np.array([1.0, 2.0, 1.5, 2.5, 1.8, 2.2, 1.1, 2.9]), max_lags=0)
    assert np.isfinite(r.statistic)


def test_constant_series_raises():
    with pytest.raises(ConstantSeriesError):
        adf_test(np.full(50, 3.25))


def test_deterministic():
    rng = np.random.default_rng(19)
    y = np.cumsum(rng.standard_normal(90))
    a = adf_test(y)
    b = adf_test(y.copy())
    assert a == b


def test_stationary_ar1_more_significant_than_walk():
    rng = np.random.default_rng(23)
    n = 300
    e = rng.standard_normal(n)
    ar = np.zeros(n)
    for t in range(1, n):
        ar[t] = 0.5 * ar[t - 1] + e[t]
    walk = np.cumsum(e)
    assert adf_test(ar).p_value < adf_test(walk).p_value
