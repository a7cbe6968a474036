"""Diffusion-index and combined quantile forecasters.

Conventions: the predictor panel ``X`` is ``n x T`` and the target ``y`` has
the same ``T`` ticks, so column ``t`` of ``X`` and ``y[t]`` describe the same
time point. A horizon-``h`` regression pairs ``y[t + h]`` with predictors at
``t`` for ``t = 0 .. T-h-1`` and the forecast uses predictors at ``T-1``.

States are 0-based in code: with the default grid, states ``0..4`` stand for
the five quantile intervals of the usual 1..5 numbering.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import QuantileGrid, SeriesWindow, ols
from .factors import FactorDecomposition, QfmOptions, _as_matrix, fit_pca_factors, fit_quantile_factors
from .quantreg import (GroupSpec, QrOptions, QrConvergenceError, fit_group_lasso_qr,
                       fit_quantile_regression, select_lambda)

WEIGHT_MODES = ("markov", "interval")


class ForecastError(RuntimeError):
    """A forecaster could not be fitted on the supplied window."""


def _target(target, T) -> np.ndarray:
    y = target.values if isinstance(target, SeriesWindow) else np.asarray(target, dtype=float).ravel()
    if y.size != T:
        raise ValueError(f"target has {y.size} ticks but the panel has {T}")
    if not np.all(np.isfinite(y)):
        raise ValueError("target values must be finite")
    return y


def _check_horizon(h, T, k):
    if h < 1:
        raise ValueError("horizon must be at least 1")
    if T - h < k:
        raise ForecastError(f"{T - h} usable observations for {k} coefficients")


# --------------------------------------------------------------------------
# diffusion-index forecaster


@dataclass(frozen=True)
class SwForecastModel:
    """``y_{t+h} = intercept + beta_f' f_t + beta_y y_t`` on principal-component factors."""

    beta_f: np.ndarray
    beta_y: float
    intercept: float
    r: int
    h: int
    f_last: np.ndarray = None
    y_last: float = None

    def forecast(self) -> float:
        """Forecast of ``y_{T+h}`` from the end of the training window."""
        return forecast_sw2002(self, self.f_last, self.y_last)


def fit_sw2002(panel, target, h: int, r: int, intercept: bool = True) -> SwForecastModel:
    """Fit the diffusion-index regression by least squares.

    Factors are principal components of the row-centered panel.

    Raises
    ------
    ForecastError
        Fewer than ``r + 3`` usable observations.
    numpy.linalg.LinAlgError
        Collinear regression design.
    """
    X = _as_matrix(panel)
    n, T = X.shape
    y = _target(target, T)
    if T - h < r + 3:
        raise ForecastError(f"{T - h} usable observations for {r} factors")
    _check_horizon(h, T, r + 2)
    dec = fit_pca_factors(X - X.mean(axis=1, keepdims=True), r)
    F = dec.factors
    cols = [F[:T - h], y[:T - h, None]]
    if intercept:
        cols.insert(0, np.ones((T - h, 1)))
    coef = ols(np.hstack(cols), y[h:])
    c0 = float(coef[0]) if intercept else 0.0
    rest = coef[1:] if intercept else coef
    return SwForecastModel(rest[:r].copy(), float(rest[r]), c0, r, h, F[-1].copy(), float(y[-1]))


def forecast_sw2002(model: SwForecastModel, f_T, y_T) -> float:
    """``intercept + beta_f' f_T + beta_y y_T``."""
    f_T = np.asarray(f_T, dtype=float).ravel()
    if f_T.size != np.size(model.beta_f):
        raise ValueError(f"expected {np.size(model.beta_f)} factor values, got {f_T.size}")
    return float(model.intercept + np.dot(model.beta_f, f_T) + model.beta_y * float(y_T))


# --------------------------------------------------------------------------
# states and transitions


@dataclass(frozen=True)
class StateMap:
    """How fitted quantiles cut the real line into states, and how state
    probabilities are spread back onto quantile levels.

    ``cuts`` are indices into the grid whose fitted quantiles are cut points;
    ``to_levels[s]`` distributes the mass of state ``s`` over the ``m`` levels.
    """

    cuts: tuple
    to_levels: np.ndarray
    masses: np.ndarray

    @property
    def n_states(self) -> int:
        return len(self.cuts) + 1

    def level_weights(self, state_probs) -> np.ndarray:
        return np.asarray(state_probs, dtype=float) @ self.to_levels

    @property
    def interval_weights(self) -> np.ndarray:
        """Level weights when every state has its no-information probability."""
        return self.level_weights(self.masses)

    @classmethod
    def for_grid(cls, grid: QuantileGrid, cuts: Sequence[int] | None = None) -> "StateMap":
        """Default map.

        With an odd number of levels the middle level is not a cut point and
        state ``s`` maps one-to-one to level ``s`` (the 3-level and 5-level
        layouts). With an even number every level is a cut point; the two
        outer states map to the outer levels and each interior state splits
        its mass equally between the levels at its two ends.
        """
        levels = np.asarray(grid.levels)
        m = levels.size
        if cuts is None:
            cuts = [i for i in range(m) if not (m % 2 == 1 and i == m // 2)]
        cuts = tuple(int(c) for c in cuts)
        if list(cuts) != sorted(set(cuts)) or (cuts and not 0 <= cuts[0] <= cuts[-1] < m):
            raise ValueError("cut indices must be increasing grid positions")
        edges = np.concatenate([[0.0], levels[list(cuts)], [1.0]])
        masses = np.diff(edges)
        S = len(cuts) + 1
        M = np.zeros((S, m))
        if S == m:
            M[np.arange(m), np.arange(m)] = 1.0
        else:
            # state s lies between cut s-1 and cut s: spread over the levels
            # at its ends (outer states take the outermost cut level)
            for s in range(S):
                ends = [cuts[j] for j in (s - 1, s) if 0 <= j < len(cuts)]
                if not ends:
                    ends = [m // 2]
                for e in ends:
                    M[s, e] += 1.0 / len(ends)
        return cls(cuts, M, masses)


def rearrange(quantiles) -> np.ndarray:
    """Monotone rearrangement (sorting) of fitted quantiles across levels."""
    return np.sort(np.asarray(quantiles, dtype=float), axis=-1)


def assign_state(y_t, fitted_quantiles, state_map: StateMap | None = None) -> int:
    """Index of the quantile interval containing ``y_t``.

    The fitted quantiles are sorted first. Values at or below the lowest cut
    go to state 0, values at or above the highest cut to the last state, and
    a value equal to an interior cut goes to the lower interval.
    """
    q = rearrange(fitted_quantiles)
    if state_map is None:
        state_map = StateMap.for_grid(QuantileGrid(tuple(np.linspace(0, 1, q.size + 2)[1:-1])))
    c = q[list(state_map.cuts)]
    if c.size == 0:
        return 0
    y_t = float(y_t)
    if y_t <= c[0]:
        return 0
    if y_t >= c[-1]:
        return int(c.size)
    return int(np.searchsorted(c, y_t, side="left"))


def assign_states(y, fitted, state_map: StateMap) -> np.ndarray:
    """Vectorized :func:`assign_state` for ``y`` of length ``L`` and ``fitted`` ``L x m``."""
    y = np.asarray(y, dtype=float)
    c = rearrange(fitted)[:, list(state_map.cuts)]
    if c.shape[1] == 0:
        return np.zeros(y.size, dtype=int)
    s = np.sum(c < y[:, None], axis=1)
    s = np.where(y <= c[:, 0], 0, s)
    s = np.where(y >= c[:, -1], c.shape[1], s)
    return s.astype(int)


def transition_counts(states, h: int, n_states: int) -> np.ndarray:
    s = np.asarray(states, dtype=int).ravel()
    if h < 1:
        raise ValueError("horizon must be at least 1")
    if np.any((s < 0) | (s >= n_states)):
        raise ValueError("state index out of range")
    C = np.zeros((n_states, n_states))
    if s.size > h:
        np.add.at(C, (s[:-h], s[h:]), 1.0)
    return C


def estimate_transition(states, h: int, n_states: int, fallback=None) -> np.ndarray:
    """Empirical ``h``-step transition matrix.

    ``states`` is one sequence or a list of sequences whose transition counts
    are pooled with equal weight. Rows of states that never occur (among
    origins with an ``h``-step successor) are set to ``fallback``, which
    defaults to the uniform distribution.
    """
    if len(states) and np.ndim(states[0]) > 0:
        C = sum(transition_counts(s, h, n_states) for s in states)
    else:
        if len(states) <= h:
            raise ValueError("state sequence must be longer than the horizon")
        C = transition_counts(states, h, n_states)
    if fallback is None:
        fallback = np.full(n_states, 1.0 / n_states)
    fallback = np.asarray(fallback, dtype=float)
    fallback = fallback / fallback.sum()
    tot = C.sum(axis=1)
    P = np.where(tot[:, None] > 0, C / np.where(tot > 0, tot, 1.0)[:, None], fallback)
    return P


# --------------------------------------------------------------------------
# combined quantile forecaster


@dataclass(frozen=True)
class LevelFit:
    """One quantile level: factors, regression coefficients and fitted paths.

    ``coefficients`` are ordered ``(intercept, beta_f..., beta_y)`` (no
    intercept entry when fitted without one).
    """

    tau: float
    coefficients: np.ndarray
    decomposition: FactorDecomposition
    fitted: np.ndarray
    forecast: float
    active_groups: tuple = None
    lam: float = None


@dataclass(frozen=True)
class QuantileForecastModel:
    grid: QuantileGrid
    per_level: tuple
    h: int
    state_map: StateMap
    transition: np.ndarray
    state_history: np.ndarray
    intercept: bool = True

    @property
    def quantile_forecasts(self) -> np.ndarray:
        """Per-level forecasts of ``y_{T+h}`` (rearranged)."""
        return rearrange([lv.forecast for lv in self.per_level])

    @property
    def current_state(self) -> int:
        return int(self.state_history[-1])

    @property
    def fitted_quantiles(self) -> np.ndarray:
        """``(T-h) x m`` fitted quantiles of ``y_t`` given data at ``t-h``, for ``t = h..T-1``."""
        return np.column_stack([lv.fitted for lv in self.per_level])

    def with_transition(self, P) -> "QuantileForecastModel":
        P = np.asarray(P, dtype=float)
        if P.shape != self.transition.shape:
            raise ValueError("transition matrix shape mismatch")
        return replace(self, transition=P)

    def forecast(self, weight_mode: str = "markov") -> "CombinedForecast":
        return combine(self, self.quantile_forecasts, self.current_state, weight_mode)


@dataclass(frozen=True)
class CombinedForecast:
    point: float
    quantile_forecasts: np.ndarray
    weights: np.ndarray
    current_state: int


def _design(F, y, intercept):
    cols = [F, y[:, None]]
    if intercept:
        cols.insert(0, np.ones((y.size, 1)))
    return np.hstack(cols)


def _qr(design, response, tau, opts):
    try:
        return fit_quantile_regression(design, response, tau, opts).coefficients
    except QrConvergenceError as err:
        # the best iterate of a long polish is still a valid fit
        return err.best.coefficients


def _finish(grid, levels, y, h, state_map, intercept):
    fitted = np.column_stack([lv.fitted for lv in levels])
    states = assign_states(y[h:], fitted, state_map)
    P = estimate_transition(states, h, state_map.n_states, fallback=state_map.masses)
    return QuantileForecastModel(grid, tuple(levels), h, state_map, P, states, intercept)


def _resolve(panel, target, h, grid, r_per_level):
    X = _as_matrix(panel)
    n, T = X.shape
    y = _target(target, T)
    grid = grid if isinstance(grid, QuantileGrid) else QuantileGrid(tuple(grid))
    if np.ndim(r_per_level) == 0:
        r_per_level = [int(r_per_level)] * len(grid)
    r_per_level = [int(r) for r in r_per_level]
    if len(r_per_level) != len(grid):
        raise ValueError("need one factor count per quantile level")
    return X, y, grid, r_per_level


def _level_factors(X, grid, r_per_level, qfm_opts, factors):
    if factors is not None:
        if len(factors) != len(grid):
            raise ValueError("need one factor decomposition per level")
        return list(factors)
    return [fit_quantile_factors(X, tau, r, qfm_opts) for tau, r in zip(grid, r_per_level)]


def fit_quantile_forecaster(panel, target, h: int, grid=QuantileGrid(), r_per_level=3,
                            state_map: StateMap | None = None, intercept: bool = True,
                            qfm_opts: QfmOptions | None = None, qr_opts: QrOptions | None = None,
                            factors=None) -> QuantileForecastModel:
    """Per-level quantile factors and quantile forecast regressions.

    For each level ``tau``: quantile factors of the panel at ``tau``, then a
    ``tau``-quantile regression of ``y_{t+h}`` on ``(1, f_t(tau), y_t)``.
    States come from comparing ``y_t`` with the rearranged in-sample fitted
    quantiles built from data at ``t-h``; the transition matrix is their
    empirical ``h``-step frequency.

    ``factors`` may pass precomputed decompositions (one per level).
    """
    X, y, grid, r_per_level = _resolve(panel, target, h, grid, r_per_level)
    T = X.shape[1]
    _check_horizon(h, T, max(r_per_level) + 2)
    state_map = state_map or StateMap.for_grid(grid)
    decs = _level_factors(X, grid, r_per_level, qfm_opts, factors)
    levels = []
    for tau, dec in zip(grid, decs):
        Z = _design(dec.factors, y, intercept)
        beta = _qr(Z[:T - h], y[h:], tau, qr_opts)
        fitted = Z[:T - h] @ beta
        levels.append(LevelFit(float(tau), beta, dec, fitted, float(Z[-1] @ beta)))
    return _finish(grid, levels, y, h, state_map, intercept)


def combine(model: QuantileForecastModel, quantile_forecasts, current_state: int,
            weight_mode: str = "markov") -> CombinedForecast:
    """Weighted average of per-level quantile forecasts.

    ``markov`` weights are row ``current_state`` of the model's transition
    matrix spread onto levels by the state map; ``interval`` weights are the
    grid spacings. A weight row that does not sum to one exactly (e.g. a
    rounded display) is renormalized.
    """
    q = rearrange(quantile_forecasts)
    m = len(model.grid)
    if q.size != m:
        raise ValueError(f"expected {m} quantile forecasts, got {q.size}")
    if weight_mode == "interval":
        w = model.state_map.interval_weights
    elif weight_mode == "markov":
        S = model.state_map.n_states
        if not (isinstance(current_state, (int, np.integer)) and 0 <= current_state < S):
            raise ValueError(f"unknown state {current_state!r}")
        w = model.state_map.level_weights(model.transition[current_state])
    else:
        raise ValueError(f"weight mode must be one of {WEIGHT_MODES}")
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be nonnegative with positive total")
    w = w / w.sum()
    point = float(np.dot(w, q))
    # guard against rounding pushing the point outside the forecast range
    point = min(max(point, float(q[0])), float(q[-1]))
    return CombinedForecast(point, q, w, int(current_state))


def fit_extended_forecaster(panel, target, h: int, grid=QuantileGrid(), r_per_level=3,
                            lambda_selection="holdout", state_map: StateMap | None = None,
                            intercept: bool = True, qfm_opts: QfmOptions | None = None,
                            holdout_fraction: float = 0.2, gamma=None,
                            factors=None, penalize_lag: bool = False) -> QuantileForecastModel:
    """Quantile forecaster whose per-level regressions see every level's factors.

    Each level's design stacks ``(1, f_t(tau_1), ..., f_t(tau_m), y_t)``;
    a group-LASSO quantile regression with one penalized group per factor
    block (intercept unpenalized; ``y_t`` unpenalized unless
    ``penalize_lag``) picks the blocks.

    ``lambda_selection`` is ``"holdout"`` (chronological holdout over the
    default grid), a number used at every level, or a sequence of numbers
    forming the candidate grid for the holdout.
    """
    X, y, grid, r_per_level = _resolve(panel, target, h, grid, r_per_level)
    T = X.shape[1]
    state_map = state_map or StateMap.for_grid(grid)
    decs = _level_factors(X, grid, r_per_level, qfm_opts, factors)
    Fall = np.hstack([d.factors for d in decs])
    Z = _design(Fall, y, intercept)
    _check_horizon(h, T, Z.shape[1])
    sizes = ([1] if intercept else []) + [d.r for d in decs] + [1]
    flags = ([False] if intercept else []) + [True] * len(decs) + [bool(penalize_lag)]
    groups = GroupSpec.from_sizes(sizes, flags)
    offset = 1 if intercept else 0
    levels = []
    for tau, dec in zip(grid, decs):
        Zt, yt = Z[:T - h], y[h:]
        if isinstance(lambda_selection, str):
            if lambda_selection != "holdout":
                raise ValueError("lambda_selection must be 'holdout', a number or a grid")
            lam = select_lambda(Zt, yt, tau, groups, None, holdout_fraction, gamma)
        elif np.ndim(lambda_selection) == 0:
            lam = float(lambda_selection)
        else:
            lam = select_lambda(Zt, yt, tau, groups, lambda_selection, holdout_fraction, gamma)
        fit = fit_group_lasso_qr(Zt, yt, tau, groups, lam, gamma)
        beta = fit.coefficients
        active = tuple(g - offset for g in fit.active_groups
                       if groups.penalized[g] and g - offset < len(decs))
        levels.append(LevelFit(float(tau), beta, dec, Zt @ beta, float(Z[-1] @ beta),
                               active, float(lam)))
    return _finish(grid, levels, y, h, state_map, intercept)
