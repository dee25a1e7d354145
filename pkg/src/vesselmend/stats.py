"""Augmented Dickey-Fuller stationarity test (constant, no trend).

Fits ``dy_t = alpha + gamma * y_{t-1} + sum_i phi_i * dy_{t-i} + e_t`` by
QR least squares, picks the lag order by AIC over a common trimmed
sample, and maps the t-statistic on gamma to a p-value with MacKinnon's
response-surface approximation. Small p-values reject a unit root, i.e.
favor stationarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "AdfResult",
    "SeriesTooShortError",
    "ConstantSeriesError",
    "adf_test",
]

_MIN_LEN = 8

# MacKinnon response-surface coefficients for the constant-only case with
# one variate (MacKinnon 1994, "Approximate asymptotic distribution
# functions for unit-root and cointegration tests", JBES 12; updated in
# MacKinnon 2010, QED working paper 1227). p = Phi(poly(t)) with the
# small-p polynomial below the t* knee and the large-p polynomial above.
_TAU_MAX = 2.74
_TAU_MIN = -18.83
_TAU_STAR = -1.61
_SMALL_P = (2.1659, 1.4412, 3.8269e-2)
_LARGE_P = (1.7339, 9.3202e-1, -1.2745e-1, -1.0368e-2)


class SeriesTooShortError(ValueError):
    """Fewer observations than the regression needs."""


class ConstantSeriesError(ValueError):
    """A zero-variance series has no unit-root question to ask."""


@dataclass(frozen=True)
class AdfResult:
    statistic: float
    p_value: float
    lags: int
    n_obs: int


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _mackinnon_p(t: float) -> float:
    if t >= _TAU_MAX:
        return 1.0
    if t <= _TAU_MIN:
        return 0.0
    if t <= _TAU_STAR:
        c = _SMALL_P
        poly = c[0] + c[1] * t + c[2] * t * t
    else:
        c = _LARGE_P
        poly = c[0] + c[1] * t + c[2] * t * t + c[3] * t * t * t
    return _norm_cdf(poly)


def _ols_tstat(x: np.ndarray, y: np.ndarray, col: int) -> tuple[float, float]:
    """t-statistic of coefficient ``col`` and the regression SSR."""
    q, r = np.linalg.qr(x)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-12 * max(1.0, diag.max()):
        raise ValueError("degenerate regression design")
    beta = solve_triangular(r, q.T @ y)
    resid = y - x @ beta
    ssr = float(resid @ resid)
    dof = x.shape[0] - x.shape[1]
    if dof <= 0:
        raise SeriesTooShortError("no residual degrees of freedom")
    sigma2 = ssr / dof
    rinv = solve_triangular(r, np.eye(r.shape[0]))
    var = sigma2 * float(np.sum(rinv[col] * rinv[col]))
    if var <= 0:
        raise ValueError("degenerate regression design")
    return float(beta[col] / math.sqrt(var)), ssr


def _design(y: np.ndarray, dy: np.ndarray, maxlag: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows t = maxlag+1 .. n-1 of [1, y_{t-1}, dy_{t-1} .. dy_{t-maxlag}]."""
    n = len(y)
    rows = n - 1 - maxlag
    x = np.empty((rows, 2 + maxlag))
    x[:, 0] = 1.0
    x[:, 1] = y[maxlag : n - 1]
    for i in range(1, maxlag + 1):
        x[:, 1 + i] = dy[maxlag - i : n - 1 - i]
    target = dy[maxlag:]
    return x, target


def adf_test(series, max_lags: int | None = None) -> AdfResult:
    """Run the test; lag order is chosen by AIC up to ``max_lags``.

    The default cap is ``floor(12 * (n/100)**0.25)``, further limited so
    the regression keeps residual degrees of freedom. Lag candidates are
    compared on a common sample trimmed to the largest lag; the chosen
    lag is refit on all usable observations.

    Raises
    ------
    SeriesTooShortError
        If fewer than 8 observations.
    ConstantSeriesError
        If the series has zero variance.
    """
    y = np.asarray(series, dtype=np.float64).ravel()
    n = len(y)
    if n < _MIN_LEN:
        raise SeriesTooShortError(f"need >= {_MIN_LEN} observations, got {n}")
    if float(np.ptp(y)) == 0.0:
        raise ConstantSeriesError("series is constant")

    cap = max(0, (n - 1) // 2 - 2)
    if max_lags is None:
        max_lags = int(math.floor(12.0 * (n / 100.0) ** 0.25))
    max_lags = max(0, min(max_lags, cap))

    dy = np.diff(y)
    x_full, t_full = _design(y, dy, max_lags)

    best_lag = 0
    best_aic = math.inf
    nobs_sel = x_full.shape[0]
    for lag in range(max_lags + 1):
        x = x_full[:, : 2 + lag]
        try:
            _, ssr = _ols_tstat(x, t_full, 1)
        except ValueError:
            continue
        if ssr <= 0:
            aic = -math.inf
        else:
            aic = nobs_sel * math.log(ssr / nobs_sel) + 2 * (2 + lag)
        if aic < best_aic:
            best_aic = aic
            best_lag = lag

    x, target = _design(y, dy, best_lag)
    stat, _ = _ols_tstat(x, target, 1)
    return AdfResult(
        statistic=stat,
        p_value=_mackinnon_p(stat),
        lags=best_lag,
        n_obs=x.shape[0],
    )
