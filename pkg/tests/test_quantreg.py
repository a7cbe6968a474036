import numpy as np
import pytest
from numpy.testing import assert_allclose

from qff.core import check_loss, huber_check_loss
from qff.quantreg import (GroupSpec, QrConvergenceError, QrOptions, default_gamma,
                          default_lambda_grid,
                          fit_group_lasso_qr, fit_huber_quantile_regression,
                          fit_quantile_regression, group_lasso_objective, huber_gradient,
                          lambda_max, qr_batch, select_lambda,
                          vertex_descent)

from oracles import qr_grid_oracle, qr_linprog, qr_vertex_oracle


class TestQuantileRegression:
    def test_median(self):
        fit = fit_quantile_regression(np.ones((5, 1)), np.arange(1.0, 6.0), 0.5)
        assert fit.coefficients[0] == pytest.approx(3.0)
        assert fit.converged

    def test_upper_quantile_against_grid(self):
        y = np.arange(1.0, 11.0)
        fit = fit_quantile_regression(np.ones((10, 1)), y, 0.9)
        _, best = qr_grid_oracle(y, 0.9, 0.0, 11.0, 1e-3)
        assert 9.0 <= fit.coefficients[0] <= 10.0
        assert fit.objective == pytest.approx(best, abs=1e-9)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
    def test_noiseless_line(self, rng, tau):
        x = rng.normal(size=40)
        fit = fit_quantile_regression(np.column_stack([np.ones(40), x]), 2 * x, tau)
        assert_allclose(fit.coefficients, [0.0, 2.0], atol=1e-6)

    @pytest.mark.parametrize("tau", [0.1, 0.25, 0.5, 0.9])
    def test_matches_linprog(self, rng, tau):
        X = np.column_stack([np.ones(60), rng.normal(size=(60, 3))])
        y = X @ np.array([1.0, 0.5, -1.0, 2.0]) + rng.standard_t(3, size=60)
        fit = fit_quantile_regression(X, y, tau)
        ref, _ = qr_linprog(X, y, tau)
        assert fit.objective == pytest.approx(ref, abs=1e-9)

    def test_vertex_oracle(self, rng):
        for _ in range(20):
            T = int(rng.integers(5, 25))
            X = np.column_stack([np.ones(T), rng.normal(size=T)])
            y = rng.normal(size=T)
            tau = float(rng.choice([0.1, 0.5, 0.9]))
            fit = fit_quantile_regression(X, y, tau)
            assert fit.objective == pytest.approx(qr_vertex_oracle(X, y, tau), abs=1e-10)

    @pytest.mark.parametrize("tau", [0.1, 0.3, 0.5, 0.8])
    def test_quantile_property(self, rng, tau):
        T = 200
        X = np.column_stack([np.ones(T), rng.normal(size=(T, 2))])
        y = X @ np.array([0.0, 1.0, 1.0]) + rng.normal(size=T)
        res = y - X @ fit_quantile_regression(X, y, tau).coefficients
        k = X.shape[1]
        assert np.sum(res < -1e-9) <= tau * T + k
        assert np.sum(res <= 1e-9) >= tau * T - k

    def test_objective_not_above_zero_vector(self, rng):
        X = rng.normal(size=(30, 2))
        y = rng.normal(size=30)
        fit = fit_quantile_regression(X, y, 0.3)
        assert 0 <= fit.objective <= np.mean(check_loss(y, 0.3))

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            fit_quantile_regression(np.ones((3, 1)), np.ones(3), 1.2)
        with pytest.raises(ValueError):
            fit_quantile_regression(np.ones((2, 3)), np.ones(2), 0.5)
        with pytest.raises(np.linalg.LinAlgError):
            fit_quantile_regression(np.column_stack([np.ones(5), np.zeros(5)]), np.ones(5), 0.5)

    def test_budget_exhaustion_carries_best(self, rng):
        X = np.column_stack([np.ones(80), rng.normal(size=(80, 3))])
        y = rng.normal(size=80)
        with pytest.raises(QrConvergenceError) as info:
            fit_quantile_regression(X, y, 0.5, QrOptions(max_iter=1, max_pivots=0))
        best = info.value.best
        assert np.all(np.isfinite(best.coefficients))
        assert not best.converged

    def test_vertex_descent_monotone(self, rng):
        X = np.column_stack([np.ones(100), rng.normal(size=(100, 2))])
        y = rng.standard_t(2, size=100)
        hist = []
        beta, _, optimal = vertex_descent(X, y, 0.7, np.zeros(3), history=hist)
        assert optimal
        assert np.all(np.diff(hist) <= 1e-12)
        assert hist[-1] == pytest.approx(qr_linprog(X, y, 0.7)[0], abs=1e-12)

    def test_batch_matches_single(self, rng):
        D = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
        R = rng.normal(size=(6, 50))
        B, _ = qr_batch(D, R, 0.3)
        for b, y in zip(B, R):
            exact = fit_quantile_regression(D, y, 0.3).objective
            # approximate inner solver: near-optimal, not certified
            assert np.mean(check_loss(y - D @ b, 0.3)) <= exact * (1 + 1e-3)


class TestHuberRegression:
    def test_gradient_zero_at_optimum(self, rng):
        X = np.column_stack([np.ones(80), rng.normal(size=80)])
        y = rng.normal(size=80)
        fit = fit_huber_quantile_regression(X, y, 0.4, 0.3)
        assert np.max(np.abs(huber_gradient(X, y, fit.coefficients, 0.4, 0.3))) < 1e-6

    def test_gradient_check(self, rng):
        X = rng.normal(size=(40, 3))
        y = rng.normal(size=40)
        for _ in range(50):
            b = rng.normal(size=3)
            tau, gamma = rng.uniform(0.05, 0.95), rng.uniform(0.05, 1.0)
            g = huber_gradient(X, y, b, tau, gamma)
            fd = np.empty(3)
            for j in range(3):
                e = np.zeros(3)
                e[j] = 1e-6
                fd[j] = (np.mean(huber_check_loss(y - X @ (b + e), tau, gamma))
                         - np.mean(huber_check_loss(y - X @ (b - e), tau, gamma))) / 2e-6
            assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def _two_group_data(rng, T=150):
    signal = rng.normal(size=(T, 2))
    noise = rng.normal(size=(T, 3))
    y = 1.0 + signal @ np.array([2.0, -1.5]) + 0.5 * rng.normal(size=T)
    X = np.column_stack([np.ones(T), signal, noise])
    groups = GroupSpec.from_sizes([1, 2, 3], [False, True, True])
    return X, y, groups


class TestGroupLasso:
    def test_group_spec(self):
        g = GroupSpec.from_sizes([1, 3, 2], [False, True, True])
        assert g.group_sizes == (1, 3, 2)
        assert g.k == 6
        with pytest.raises(ValueError):
            GroupSpec(((0, 1), (1, 2)), (True, True))
        with pytest.raises(ValueError):
            GroupSpec(((0,), (2,)), (True, True))

    def test_zero_penalty_is_huber_fit(self, rng):
        X, y, groups = _two_group_data(rng)
        gamma = default_gamma(y)
        gl = fit_group_lasso_qr(X, y, 0.5, groups, 0.0, gamma)
        hb = fit_huber_quantile_regression(X, y, 0.5, gamma)
        assert_allclose(gl.coefficients, hb.coefficients, atol=1e-4)

    def test_huge_penalty_zeroes_groups(self, rng):
        X, y, groups = _two_group_data(rng)
        fit = fit_group_lasso_qr(X, y, 0.5, groups, 1e6)
        assert np.all(fit.coefficients[1:] == 0.0)
        assert fit.active_groups == (0,)
        assert fit.coefficients[0] != 0.0

    def test_noise_group_dropped_somewhere_on_path(self, rng):
        X, y, groups = _two_group_data(rng)
        lmax = lambda_max(X, y, 0.5, groups)
        picks = [fit_group_lasso_qr(X, y, 0.5, groups, lam).active_groups
                 for lam in lmax * np.logspace(-3, 0, 15)]
        assert (0, 1) in picks

    def test_all_or_nothing_groups(self, rng):
        X, y, groups = _two_group_data(rng)
        lmax = lambda_max(X, y, 0.5, groups)
        for lam in lmax * np.array([0.05, 0.3, 0.8]):
            fit = fit_group_lasso_qr(X, y, 0.5, groups, lam)
            for l, g in enumerate(groups.groups):
                norm = np.linalg.norm(fit.coefficients[list(g)])
                assert norm == 0.0 or norm > 1e-8
                assert (l in fit.active_groups) == (norm > 0)

    def test_lambda_max_zeroes_everything(self, rng):
        X, y, groups = _two_group_data(rng)
        lmax = lambda_max(X, y, 0.3, groups)
        assert fit_group_lasso_qr(X, y, 0.3, groups, lmax * 1.001).active_groups == (0,)
        assert len(fit_group_lasso_qr(X, y, 0.3, groups, lmax * 0.5).active_groups) > 1

    def test_objective_monotone(self, rng):
        X, y, groups = _two_group_data(rng)
        fit = fit_group_lasso_qr(X, y, 0.7, groups, 0.05)
        h = np.asarray(fit.history)
        assert np.all(np.diff(h) <= 1e-12)
        assert fit.objective == pytest.approx(
            group_lasso_objective(X, y, fit.coefficients, 0.7, groups, 0.05, fit.gamma))

    def test_unpenalized_loss_smallest_at_zero(self, rng):
        X, y, groups = _two_group_data(rng)
        gamma = default_gamma(y)
        base = fit_group_lasso_qr(X, y, 0.5, groups, 0.0, gamma)
        f0 = np.mean(huber_check_loss(y - X @ base.coefficients, 0.5, gamma))
        for lam in (0.01, 0.1, 1.0):
            b = fit_group_lasso_qr(X, y, 0.5, groups, lam, gamma).coefficients
            assert f0 <= np.mean(huber_check_loss(y - X @ b, 0.5, gamma)) + 1e-10

    def test_unpenalized_groups_not_shrunk(self, rng):
        T = 100
        x = rng.normal(size=T)
        y = 3.0 + 2.0 * x + 0.1 * rng.normal(size=T)
        X = np.column_stack([np.ones(T), x, rng.normal(size=T)])
        groups = GroupSpec.from_sizes([1, 1, 1], [False, False, True])
        fit = fit_group_lasso_qr(X, y, 0.5, groups, 1e6)
        assert fit.coefficients[1] == pytest.approx(2.0, abs=0.05)
        assert fit.coefficients[2] == 0.0


class TestSelectLambda:
    def test_single_point(self, rng):
        X, y, groups = _two_group_data(rng)
        assert select_lambda(X, y, 0.5, groups, [0.37]) == 0.37

    def test_strong_signal_never_null(self, rng):
        X, y, groups = _two_group_data(rng)
        assert select_lambda(X, y, 0.5, groups, [0.0, 1e6]) == 0.0

    def test_pure_noise_prefers_largest(self, rng):
        wins = 0
        groups = GroupSpec.from_sizes([1, 2, 2], [False, True, True])
        for _ in range(100):
            T = 100
            X = np.column_stack([np.ones(T), rng.normal(size=(T, 4))])
            y = rng.normal(size=T)
            n_fit = T - int(round(0.2 * T))
            grid = default_lambda_grid(X[:n_fit], y[:n_fit], 0.5, groups)
            wins += select_lambda(X, y, 0.5, groups) == grid.max()
        assert wins > 50

    def test_bad_fraction(self, rng):
        X, y, groups = _two_group_data(rng)
        with pytest.raises(ValueError):
            select_lambda(X, y, 0.5, groups, [0.1, 1.0], holdout_fraction=0.7)
