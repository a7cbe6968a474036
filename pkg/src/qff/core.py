"""Data containers, loss functions and small numerical helpers shared by every module.

Panels are always stored with rows = entities (variables) and columns = time
points, so a panel with ``n`` series observed over ``T`` ticks has ``values``
of shape ``(n, T)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)


class PanelError(ValueError):
    """Raised for malformed or unsuitable panel data."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Panel:
    """An ``n x T`` observation matrix with labels and an observation mask.

    Entries where ``mask`` is False are missing; their slot in ``values`` is
    NaN. Solver modules require complete panels (see :attr:`is_complete`).
    """

    values: np.ndarray
    entity_ids: tuple
    time_index: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            raise PanelError("panel values must be a 2-d array")
        n, T = values.shape
        mask = np.isfinite(values) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != (n, T):
            raise PanelError(f"mask shape {mask.shape} does not match values {(n, T)}")
        if not np.all(np.isfinite(values[mask])):
            raise PanelError("observed entries must be finite")
        values[~mask] = np.nan
        entity_ids = tuple(self.entity_ids)
        if len(entity_ids) != n:
            raise PanelError(f"{len(entity_ids)} entity ids for {n} rows")
        if len(set(entity_ids)) != n:
            raise PanelError("entity ids must be unique")
        time_index = np.asarray(self.time_index)
        if time_index.shape != (T,):
            raise PanelError(f"time index of length {time_index.shape} for {T} columns")
        if T > 1 and not np.all(np.diff(time_index) > 0):
            raise PanelError("time index must be strictly increasing")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask, bool))
        object.__setattr__(self, "entity_ids", entity_ids)
        object.__setattr__(self, "time_index", _frozen(time_index, time_index.dtype))

    @classmethod
    def from_array(cls, values, entity_ids=None, time_index=None) -> "Panel":
        values = np.asarray(values, dtype=float)
        n, T = values.shape
        if entity_ids is None:
            entity_ids = [f"e{i}" for i in range(n)]
        if time_index is None:
            time_index = np.arange(T)
        return cls(values, tuple(entity_ids), time_index)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def is_complete(self) -> bool:
        return bool(self.mask.all())

    def require_complete(self) -> np.ndarray:
        """Return the value matrix, raising if anything is missing."""
        if not self.is_complete:
            raise PanelError("panel has missing entries; impute first")
        return self.values

    def row(self, entity_id) -> np.ndarray:
        return self.values[self.entity_ids.index(entity_id)]

    def window(self, start: int, stop: int) -> "Panel":
        """Columns ``start:stop`` (positional)."""
        return Panel(self.values[:, start:stop], self.entity_ids,
                     self.time_index[start:stop], self.mask[:, start:stop])

    def select(self, rows: Sequence[int]) -> "Panel":
        rows = list(rows)
        return Panel(self.values[rows], [self.entity_ids[i] for i in rows],
                     self.time_index, self.mask[rows])

    def drop(self, entity_id) -> "Panel":
        i = self.entity_ids.index(entity_id)
        return self.select([j for j in range(self.n) if j != i])

    def with_values(self, values) -> "Panel":
        return Panel(values, self.entity_ids, self.time_index)


@dataclass(frozen=True, eq=False)
class SeriesWindow:
    """A scalar time series ``y_1..y_T`` to be forecast."""

    values: np.ndarray
    time_index: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size < 2:
            raise ValueError("a series window needs at least two observations")
        if not np.all(np.isfinite(values)):
            raise ValueError("series values must be finite")
        time_index = np.arange(values.size) if self.time_index is None else np.asarray(self.time_index)
        if time_index.shape != values.shape:
            raise ValueError("time index length does not match values")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "time_index", _frozen(time_index, time_index.dtype))

    def __len__(self) -> int:
        return self.values.size

    @property
    def last(self) -> float:
        return float(self.values[-1])

    def head(self, length: int) -> "SeriesWindow":
        return SeriesWindow(self.values[:length], self.time_index[:length])


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing quantile levels inside (0, 1)."""

    levels: tuple = DEFAULT_LEVELS

    def __post_init__(self):
        levels = tuple(float(t) for t in self.levels)
        if not levels:
            raise ValueError("a quantile grid needs at least one level")
        if levels[0] <= 0 or levels[-1] >= 1:
            raise ValueError("quantile levels must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("quantile levels must be strictly increasing")
        object.__setattr__(self, "levels", levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Each replication gets its own ``stream_id``; streams are derived through
    :class:`numpy.random.SeedSequence` spawn keys, so they are statistically
    independent and do not depend on the order in which they are consumed.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()

    def generator(self) -> np.random.Generator:
        key = (int(self.stream_id),) + tuple(int(k) for k in self.path)
        ss = np.random.SeedSequence(int(self.seed), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, k: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + (int(k),))


def _check_tau(tau):
    if not 0 < tau < 1:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")


def check_loss(u, tau):
    """Quantile check function ``rho_tau(u) = u * (tau - 1{u < 0})``.

    Works elementwise on arrays.
    """
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return float(out) if out.ndim == 0 else out


def huber_check_loss(u, tau, gamma):
    """Huber-smoothed check loss.

    The symmetric Huber function ``u**2 / (2 gamma)`` on ``|u| <= gamma`` and
    ``|u| - gamma / 2`` outside is weighted by ``tau`` for ``u >= 0`` and by
    ``1 - tau`` for ``u < 0``. The result is convex, C^1 and within
    ``gamma / 2`` of :func:`check_loss` everywhere.
    """
    _check_tau(tau)
    if not gamma > 0:
        raise ValueError("Huber radius must be positive")
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    h = np.where(a <= gamma, 0.5 * u * u / gamma, a - 0.5 * gamma)
    out = np.where(u >= 0, tau, 1.0 - tau) * h
    return float(out) if out.ndim == 0 else out


def huber_check_grad(u, tau, gamma):
    """Derivative of :func:`huber_check_loss` with respect to ``u``."""
    u = np.asarray(u, dtype=float)
    w = np.where(u >= 0, tau, 1.0 - tau)
    return w * np.clip(u / gamma, -1.0, 1.0)


def center_rows(panel: Panel):
    """Subtract each row's mean.

    Returns
    -------
    centered : Panel
    row_means : ndarray of shape (n,)
    """
    X = panel.require_complete()
    means = X.mean(axis=1)
    return panel.with_values(X - means[:, None]), means


def standardize_rows(panel: Panel):
    """Center and scale rows to unit variance; constant rows are only centered."""
    centered, means = center_rows(panel)
    sd = centered.values.std(axis=1)
    sd = np.where(sd > 0, sd, 1.0)
    return centered.with_values(centered.values / sd[:, None]), means, sd


def ols(design, response):
    """Least-squares coefficients, raising on rank deficiency."""
    design = np.asarray(design, dtype=float)
    coef, _, rank, _ = np.linalg.lstsq(design, response, rcond=None)
    if rank < design.shape[1]:
        raise np.linalg.LinAlgError("design matrix is rank deficient")
    return coef


def adjusted_r_squared(response, design) -> float:
    """Adjusted R^2 of an OLS fit of ``response`` on ``design`` plus an intercept."""
    y = np.asarray(response, dtype=float).ravel()
    Z = np.asarray(design, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    T, k = Z.shape
    if T != y.size:
        raise ValueError("response and design lengths differ")
    if T <= k + 1:
        raise ValueError("need more observations than regressors plus one")
    tss = np.sum((y - y.mean()) ** 2)
    if tss <= 0:
        raise ValueError("response has zero variance")
    A = np.column_stack([np.ones(T), Z])
    beta = ols(A, y)
    rss = np.sum((y - A @ beta) ** 2)
    return float(1.0 - (rss / (T - k - 1)) / (tss / (T - 1)))
