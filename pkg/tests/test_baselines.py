import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from qff.baselines import (ArModel, fit_ar_aic, fit_arima, fit_near_stations, forecast_ar,
                           forecast_arima, forecast_naive, kpss_select_d, kpss_statistic)
from qff.core import SeriesWindow


def _ar2(rng, T, phi=(0.5, 0.3), burn=200):
    e = rng.normal(size=T + burn)
    y = np.zeros(T + burn)
    for t in range(2, T + burn):
        y[t] = phi[0] * y[t - 1] + phi[1] * y[t - 2] + e[t]
    return y[burn:]


class TestNaive:
    def test_last_value(self):
        assert forecast_naive(np.array([1.0, 3.0, 7.5]), 3) == 7.5

    def test_horizon_free(self, rng):
        y = rng.normal(size=20)
        assert forecast_naive(y, 1) == forecast_naive(y, 6)

    def test_window_and_errors(self):
        assert forecast_naive(SeriesWindow(np.array([2.0, 4.0]))) == 4.0
        with pytest.raises(ValueError):
            forecast_naive(np.array([]))


class TestAr:
    def test_random_walk_persistence(self):
        m = ArModel(1, 0.0, np.array([1.0]), 1.0)
        assert forecast_ar(m, [3.0, 5.0], 4) == 5.0

    def test_zero_coefficients(self):
        m = ArModel(2, 1.3, np.zeros(2), 1.0)
        for h in (1, 3):
            assert forecast_ar(m, [3.0, 5.0], h) == 1.3

    def test_recursive_arithmetic(self):
        m = ArModel(1, 0.0, np.array([0.5]), 1.0)
        assert forecast_ar(m, [1.0, 8.0], 2) == pytest.approx(2.0)

    def test_selects_two(self, rng):
        hits = sum(fit_ar_aic(_ar2(rng, 500)).order == 2 for _ in range(200))
        assert hits >= 140

    def test_white_noise_coefficients(self, rng):
        m = fit_ar_aic(rng.normal(size=500))
        assert np.all(np.abs(m.coefficients) < 3 / np.sqrt(500))

    def test_ar1_coefficient(self, rng):
        e = rng.normal(size=700)
        y = np.zeros(700)
        for t in range(1, 700):
            y[t] = 0.8 * y[t - 1] + e[t]
        m = fit_ar_aic(y[200:])
        assert 0.7 <= m.coefficients[0] <= 0.9

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_ar_aic(np.ones(50))
        with pytest.raises(ValueError):
            fit_ar_aic(np.arange(7.0))
        with pytest.raises(ValueError):
            forecast_ar(ArModel(3, 0.0, np.zeros(3), 1.0), [1.0], 1)


class TestKpss:
    def test_matches_reference(self, rng):
        from statsmodels.tsa.stattools import kpss
        for y in (rng.normal(size=300), np.cumsum(rng.normal(size=300))):
            lags = int(np.floor(4 * (y.size / 100) ** 0.25))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ref = kpss(y, regression="c", nlags=lags)[0]
            assert kpss_statistic(y) == pytest.approx(ref, rel=1e-10)

    def test_white_noise(self, rng):
        hits = sum(kpss_select_d(rng.normal(size=500)) == 0 for _ in range(200))
        assert hits >= 180

    def test_random_walk(self, rng):
        hits = sum(kpss_select_d(np.cumsum(rng.normal(size=500))) == 1 for _ in range(200))
        assert hits >= 180

    def test_constant(self):
        assert kpss_statistic(np.full(50, 3.0)) == 0.0
        assert kpss_select_d(np.full(50, 3.0)) == 0

    def test_shift_invariant(self, rng):
        y = rng.normal(size=100)
        assert kpss_statistic(y + 17.0) == pytest.approx(kpss_statistic(y), rel=1e-9)

    def test_too_short(self):
        with pytest.raises(ValueError):
            kpss_select_d(np.arange(10.0))


class TestArima:
    def test_ar_nesting(self, rng):
        y = _ar2(rng, 500)
        m = fit_arima(y, 6, 6, d=0)
        ar = fit_arima(y, 2, 0, d=0)
        p, _, q = m.order
        assert q == 0 or m.noise_variance <= 1.05 * ar.noise_variance

    def test_pure_ar_matches_least_squares(self, rng):
        y = _ar2(rng, 300)
        m = fit_arima(y, 2, 0, d=0)
        assert m.order == (2, 0, 0)
        ref = fit_ar_aic(y, 2)
        assert ref.order == 2
        assert_allclose(m.ar_coefficients, ref.coefficients, atol=1e-4)
        assert m.intercept == pytest.approx(ref.intercept, abs=1e-4)

    def test_ma1(self, rng):
        good = 0
        for _ in range(100):
            e = rng.normal(size=501)
            y = e[1:] + 0.6 * e[:-1]
            m = fit_arima(y, 6, 6, d=0)
            if m.order[2] >= 1 and 0.45 <= m.ma_coefficients[0] <= 0.75:
                good += 1
        assert good > 50

    def test_random_walk_like_naive(self, rng):
        y = np.cumsum(rng.normal(size=400))
        m = fit_arima(y, 0, 0, d=1)
        assert m.order == (0, 1, 0)
        assert forecast_arima(m, y, 3) == pytest.approx(y[-1] + 3 * m.intercept)
        assert abs(m.intercept) < 0.2

    def test_forecasts_finite(self, rng):
        y = np.cumsum(rng.normal(size=200))
        m = fit_arima(y, 3, 3)
        assert all(np.isfinite(m.forecast(y, h)) for h in range(1, 7))

    def test_too_short(self):
        with pytest.raises(ValueError):
            fit_arima(np.arange(10.0) ** 2, 6, 6, d=0)


class TestNearStations:
    def test_exact_predictor(self, rng):
        T = 100
        neighbor = rng.normal(size=T)
        target = np.concatenate([[0.0], neighbor[:-1]])
        m = fit_near_stations(target, neighbor[None, :], 1)
        Z = np.column_stack([np.ones(T), neighbor, target])[:-1]
        assert np.max(np.abs(Z @ m.coefficients - target[1:])) < 1e-8
        assert not m.ridge

    def test_no_neighbors(self, rng):
        y = rng.normal(size=60)
        m = fit_near_stations(y, np.empty((0, 60)), 1)
        ref = np.linalg.lstsq(np.column_stack([np.ones(59), y[:-1]]), y[1:], rcond=None)[0]
        assert_allclose(m.coefficients, ref)
        assert m.forecast() == pytest.approx(ref[0] + ref[1] * y[-1])

    def test_noise_neighbors_shrink(self, rng):
        y = np.cumsum(rng.normal(size=500)) * 0.1
        m = fit_near_stations(y, rng.normal(size=(3, 500)), 1)
        assert np.all(np.abs(m.coefficients[1:4]) < 0.05)

    def test_collinear_ridge(self, rng):
        y = rng.normal(size=50)
        n = rng.normal(size=50)
        with pytest.warns(RuntimeWarning):
            m = fit_near_stations(y, np.vstack([n, n]), 1)
        assert m.ridge
        assert np.isfinite(m.forecast())
