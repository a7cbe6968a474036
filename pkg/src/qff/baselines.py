"""Comparison forecasters: naive, autoregression, ARIMA and nearest-station regression."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .core import SeriesWindow

log = logging.getLogger(__name__)

KPSS_CRITICAL_5PCT = 0.463


def _series(y) -> np.ndarray:
    v = y.values if isinstance(y, SeriesWindow) else np.asarray(y, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("series is empty")
    if not np.all(np.isfinite(v)):
        raise ValueError("series values must be finite")
    return v


def forecast_naive(y, h: int = 1) -> float:
    """Last observation, whatever the horizon."""
    return float(_series(y)[-1])


# --------------------------------------------------------------------------
# autoregression


@dataclass(frozen=True)
class ArModel:
    order: int
    intercept: float
    coefficients: np.ndarray
    noise_variance: float
    aic: float = np.nan


def _lag_matrix(v, p, start):
    """Rows ``t = start..len(v)-1`` of ``[1, v[t-1], ..., v[t-p]]``."""
    T = v.size
    cols = [np.ones(T - start)] + [v[start - i:T - i] for i in range(1, p + 1)]
    return np.column_stack(cols)


def fit_ar_aic(y, p_max: int = 6) -> ArModel:
    """AR order by AIC, fitted by conditional least squares with intercept.

    Every order ``p = 1..p_max`` is fitted on the same effective sample
    (the first ``p_max`` observations only serve as lags), and
    ``AIC = T_eff ln(RSS / T_eff) + 2 (p + 1)``.
    """
    v = _series(y)
    T = v.size
    if T <= p_max + 2:
        raise ValueError(f"need more than {p_max + 2} observations")
    if np.ptp(v) <= 1e-12 * max(1.0, np.max(np.abs(v))):
        raise ValueError("series is (nearly) constant")
    target = v[p_max:]
    T_eff = target.size
    best = None
    for p in range(1, p_max + 1):
        Z = _lag_matrix(v, p, p_max)
        coef, *_ = np.linalg.lstsq(Z, target, rcond=None)
        rss = float(np.sum((target - Z @ coef) ** 2))
        aic = T_eff * np.log(max(rss, 1e-300) / T_eff) + 2 * (p + 1)
        if best is None or aic < best.aic:
            best = ArModel(p, float(coef[0]), coef[1:].copy(), rss / T_eff, float(aic))
    return best


def forecast_ar(model: ArModel, y, h: int = 1) -> float:
    """``h``-step forecast by feeding one-step forecasts back as lags."""
    v = _series(y)
    p = model.order
    if v.size < p:
        raise ValueError(f"need at least {p} observations")
    if h < 1:
        raise ValueError("horizon must be at least 1")
    hist = list(v[v.size - p:]) if p else []
    out = model.intercept
    for _ in range(h):
        out = model.intercept + sum(model.coefficients[i] * hist[-1 - i] for i in range(p))
        hist.append(out)
    return float(out)


# --------------------------------------------------------------------------
# KPSS and ARIMA


def kpss_statistic(y) -> float:
    """Level-stationarity KPSS statistic with a Bartlett long-run variance.

    The lag window is ``floor(4 (T/100)^(1/4))``. A constant series gives 0.
    """
    v = _series(y)
    T = v.size
    e = v - v.mean()
    s0 = float(e @ e) / T
    if s0 <= 1e-24 * max(1.0, float(np.mean(v * v))):
        return 0.0
    lags = int(np.floor(4.0 * (T / 100.0) ** 0.25))
    lrv = s0
    for l in range(1, lags + 1):
        lrv += 2.0 * (1.0 - l / (lags + 1.0)) * float(e[l:] @ e[:-l]) / T
    S = np.cumsum(e)
    return float(np.sum(S * S) / (T * T * lrv))


def kpss_select_d(y) -> int:
    """1 if the KPSS statistic exceeds the 5% critical value 0.463, else 0."""
    v = _series(y)
    if v.size < 20:
        raise ValueError("KPSS needs at least 20 observations")
    return int(kpss_statistic(v) > KPSS_CRITICAL_5PCT)


@dataclass(frozen=True)
class ArimaModel:
    order: tuple
    intercept: float
    ar_coefficients: np.ndarray
    ma_coefficients: np.ndarray
    noise_variance: float
    aic: float
    residuals: np.ndarray = None

    def forecast(self, y, h: int = 1) -> float:
        return forecast_arima(self, y, h)


def _css_residuals(params, w, p, q, start):
    c = params[0]
    phi = params[1:1 + p]
    theta = params[1 + p:1 + p + q]
    a = w[start:] - c
    for i in range(p):
        a = a - phi[i] * w[start - 1 - i:w.size - 1 - i]
    if q:
        a = lfilter([1.0], np.concatenate([[1.0], theta]), a)
    return a


def _invertible(theta) -> bool:
    if theta.size == 0:
        return True
    roots = np.roots(np.concatenate([theta[::-1], [1.0]]))
    return bool(np.all(np.abs(roots) > 1.05))


def _fit_css(w, p, q, start, max_iter=50, tol=1e-10):
    """Conditional-sum-of-squares fit of ARMA(p, q) with intercept.

    With ``q = 0`` this is least squares. Otherwise a Hannan-Rissanen start
    is refined by Gauss-Newton with step halving that keeps the MA
    polynomial invertible; the Jacobian is itself a filtered regressor
    matrix, ``d eps / d params = -[1, w_lags, eps_lags] / theta(B)``.
    """
    Z = _lag_matrix(w, p, start)
    coef, *_ = np.linalg.lstsq(Z, w[start:], rcond=None)
    if q == 0:
        return coef, _css_residuals(coef, w, p, 0, start)
    # Hannan-Rissanen start: long AR residuals stand in for the shocks
    m = min(max(p + q, 6), start)
    long_coef, *_ = np.linalg.lstsq(_lag_matrix(w, m, m), w[m:], rcond=None)
    eps = np.zeros(w.size)
    eps[m:] = w[m:] - _lag_matrix(w, m, m) @ long_coef
    cols = [Z] + [eps[start - j:w.size - j, None] for j in range(1, q + 1)]
    x, *_ = np.linalg.lstsq(np.hstack(cols), w[start:], rcond=None)
    while not _invertible(x[1 + p:]):
        x[1 + p:] *= 0.5
    res = _css_residuals(x, w, p, q, start)
    rss = float(res @ res)
    n = res.size
    for _ in range(max_iter):
        theta = x[1 + p:]
        den = np.concatenate([[1.0], theta])
        lagged = np.zeros((n, q))
        for j in range(1, q + 1):
            lagged[j:, j - 1] = res[:-j]
        J = lfilter([1.0], den, np.hstack([Z, lagged]), axis=0)
        step, *_ = np.linalg.lstsq(J, res, rcond=None)
        t = 1.0
        improved = False
        for _ in range(30):
            cand = x + t * step
            if _invertible(cand[1 + p:]):
                r = _css_residuals(cand, w, p, q, start)
                rc = float(r @ r)
                if rc < rss:
                    improved = True
                    break
            t *= 0.5
        if not improved:
            break
        gain = rss - rc
        x, res, rss = cand, r, rc
        if gain <= tol * max(rss, 1e-300):
            break
    return x, res


def fit_arima(y, p_max: int = 6, q_max: int = 6, d: int | None = None) -> ArimaModel:
    """ARIMA order by AIC over ``(p, q)``, fitted by conditional sum of squares.

    ``d`` comes from :func:`kpss_select_d` unless given. All candidates share
    the effective sample that conditions on ``max(p_max, q_max)`` initial
    values of the (differenced) series, with pre-sample shocks set to zero.
    ``AIC = T_eff ln(RSS / T_eff) + 2 (p + q + 1)``.
    """
    v = _series(y)
    d = kpss_select_d(v) if d is None else int(d)
    if d not in (0, 1):
        raise ValueError("d must be 0 or 1")
    w = np.diff(v) if d else v
    start = max(p_max, q_max, 1)
    T_eff = w.size - start
    if T_eff < p_max + q_max + 5:
        raise ValueError("series too short for the requested orders")
    best = None
    for p in range(p_max + 1):
        for q in range(q_max + 1):
            try:
                x, res = _fit_css(w, p, q, start)
            except (np.linalg.LinAlgError, ValueError) as err:
                log.debug("ARIMA(%d,%d,%d) failed: %s", p, d, q, err)
                continue
            rss = float(res @ res)
            if not np.isfinite(rss):
                continue
            aic = T_eff * np.log(max(rss, 1e-300) / T_eff) + 2 * (p + q + 1)
            if best is None or aic < best.aic:
                best = ArimaModel((p, d, q), float(x[0]), x[1:1 + p].copy(),
                                  x[1 + p:].copy(), rss / T_eff, float(aic), res)
    if best is None:
        raise RuntimeError("every ARIMA candidate failed to fit")
    return best


def forecast_arima(model: ArimaModel, y, h: int = 1) -> float:
    """Recursive forecast with future shocks at zero, undoing the differencing."""
    v = _series(y)
    p, d, q = model.order
    w = np.diff(v) if d else v
    phi, theta = model.ar_coefficients, model.ma_coefficients
    eps = list(model.residuals[-q:]) if q and model.residuals is not None else [0.0] * q
    hist = list(w[w.size - p:]) if p else []
    path = []
    for step in range(h):
        val = model.intercept + sum(phi[i] * hist[-1 - i] for i in range(p))
        val += sum(theta[j] * eps[-1 - j] for j in range(q) if step <= j)
        hist.append(val)
        path.append(val)
        if q:
            eps.append(0.0)
    if d:
        return float(v[-1] + np.sum(path))
    return float(path[-1])


# --------------------------------------------------------------------------
# nearest stations


@dataclass(frozen=True)
class NearModel:
    coefficients: np.ndarray
    h: int
    ridge: bool
    design_last: np.ndarray

    def forecast(self) -> float:
        return float(self.design_last @ self.coefficients)


def fit_near_stations(target, neighbors, h: int) -> NearModel:
    """Least squares of ``y_{t+h}`` on ``(1, neighbor values at t, y_t)``.

    ``neighbors`` is ``r x T`` (``r`` may be 0). A rank-deficient design
    falls back to ridge regression with penalty ``1e-8`` and sets ``ridge``.
    """
    y = _series(target)
    T = y.size
    N = np.asarray(neighbors, dtype=float).reshape(-1, T) if np.size(neighbors) else np.empty((0, T))
    if h < 1 or T - h < N.shape[0] + 2:
        raise ValueError("not enough observations for the near-station regression")
    Z = np.column_stack([np.ones(T), N.T, y])
    A, b = Z[:T - h], y[h:]
    coef, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    ridge = rank < A.shape[1]
    if ridge:
        warnings.warn("collinear neighbor series; using ridge fallback", RuntimeWarning)
        coef = np.linalg.solve(A.T @ A + 1e-8 * np.eye(A.shape[1]), A.T @ b)
    return NearModel(coef, h, bool(ridge), Z[-1].copy())
