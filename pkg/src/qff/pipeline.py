"""Panel ingestion, EM imputation and rolling-origin forecast evaluation.

Ticks in an :class:`EvaluationPlan` are column positions of the (complete)
panel. A forecast made at origin ``T`` for horizon ``h`` uses only columns
``T - window_length + 1 .. T`` and is scored against column ``T + h``.
"""
from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import fit_ar_aic, fit_arima, fit_near_stations, forecast_ar, forecast_arima
from .core import Panel, PanelError, QuantileGrid
from .factors import QfmOptions, fit_quantile_factors, select_r_bai_ng, select_r_quantile
from .forecasting import (StateMap, assign_states, estimate_transition, fit_extended_forecaster,
                          fit_quantile_forecaster, fit_sw2002)
from .quantreg import qr_batch

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
PIPELINE_METHODS = ("naive", "ar", "arima", "near", "sw2002", "proposed", "extended")
_MISSING = {"", "na", "nan", "null"}


class DataError(PanelError):
    """Malformed input file."""


class EvaluationError(RuntimeError):
    """Too many (entity, origin) forecasts failed."""


# --------------------------------------------------------------------------
# loading


@dataclass(frozen=True)
class LoadReport:
    dropped: tuple
    missing_rates: dict
    threshold: float


def _number(text, path, line, what):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse {what} {text!r}") from None


def _tick(text, path, line):
    try:
        return int(text)
    except ValueError:
        v = _number(text, path, line, "time")
        if v != int(v):
            raise DataError(f"{path}:{line}: time must be an integer tick, got {text!r}") from None
        return int(v)


def _read_long(path, fh):
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:3]] != ["entity_id", "time", "value"]:
        raise DataError(f"{path}:1: expected header entity_id,time,value")
    cells, entities, times = {}, {}, set()
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{line}: expected 3 fields, got {len(row)}")
        eid, t, v = (c.strip() for c in row)
        if not eid:
            raise DataError(f"{path}:{line}: empty entity id")
        t = _tick(t, path, line)
        if (eid, t) in cells:
            raise DataError(f"{path}:{line}: duplicate entry for entity {eid!r} at time {t}")
        cells[(eid, t)] = np.nan if v.lower() in _MISSING else _number(v, path, line, "value")
        entities.setdefault(eid, None)
        times.add(t)
    times = sorted(times)
    col = {t: j for j, t in enumerate(times)}
    row_of = {e: i for i, e in enumerate(entities)}
    X = np.full((len(entities), len(times)), np.nan)
    for (e, t), v in cells.items():
        X[row_of[e], col[t]] = v
    return X, list(entities), np.asarray(times)


def _read_wide(path, fh):
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or not header or header[0].strip() != "time" or len(header) < 2:
        raise DataError(f"{path}:1: expected header time,<entity ids>")
    ids = [h.strip() for h in header[1:]]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}:1: duplicate entity columns")
    rows, times = [], []
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        t = _tick(row[0].strip(), path, line)
        if times and t in times[-1:]:
            raise DataError(f"{path}:{line}: duplicate time {t}")
        times.append(t)
        rows.append([np.nan if c.strip().lower() in _MISSING else _number(c.strip(), path, line, "value")
                     for c in row[1:]])
    if len(set(times)) != len(times):
        raise DataError(f"{path}: duplicate time rows")
    order = np.argsort(times, kind="stable")
    X = np.asarray(rows, dtype=float).reshape(len(times), len(ids))[order].T
    return X, ids, np.asarray(times)[order]


def read_panel(path, fmt: str = "long", drop_threshold: float = 0.20):
    """Read a panel CSV and drop entities missing more than ``drop_threshold``.

    Returns ``(Panel, LoadReport)``.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        if fmt == "long":
            X, ids, times = _read_long(path, fh)
        elif fmt == "wide":
            X, ids, times = _read_wide(path, fh)
        else:
            raise ValueError("format must be 'long' or 'wide'")
    if X.size == 0:
        raise DataError(f"{path}: no data rows")
    rates = {e: float(np.mean(~np.isfinite(X[i]))) for i, e in enumerate(ids)}
    keep = [i for i, e in enumerate(ids) if rates[e] <= drop_threshold]
    dropped = tuple(e for e in ids if rates[e] > drop_threshold)
    for e in dropped:
        log.info("dropping %s: %.1f%% missing", e, 100 * rates[e])
    if not keep:
        raise DataError(f"{path}: every entity exceeds the missing-rate threshold")
    panel = Panel(X[keep], [ids[i] for i in keep], times)
    return panel, LoadReport(dropped, rates, drop_threshold)


def load_panel(path, fmt: str = "long", drop_threshold: float = 0.20) -> Panel:
    return read_panel(path, fmt, drop_threshold)[0]


def write_panel(panel: Panel, path, fmt: str = "wide") -> None:
    """Write a panel as CSV; missing entries are left empty (wide) or omitted (long)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fmt == "wide":
            w.writerow(["time", *panel.entity_ids])
            for j, t in enumerate(panel.time_index):
                w.writerow([t] + [repr(float(v)) if m else "" for v, m in
                                  zip(panel.values[:, j], panel.mask[:, j])])
        elif fmt == "long":
            w.writerow(["entity_id", "time", "value"])
            for i, e in enumerate(panel.entity_ids):
                for j, t in enumerate(panel.time_index):
                    if panel.mask[i, j]:
                        w.writerow([e, t, repr(float(panel.values[i, j]))])
        else:
            raise ValueError("format must be 'long' or 'wide'")


# --------------------------------------------------------------------------
# stations


@dataclass(frozen=True)
class StationMeta:
    entity_id: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if not (abs(self.latitude) <= 90 and abs(self.longitude) <= 180):
            raise ValueError(f"coordinates out of range for {self.entity_id!r}")


def load_meta(path) -> list:
    """Read ``entity_id,lat,lon`` rows."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["entity_id", "lat", "lon"]:
            raise DataError(f"{path}:1: expected header entity_id,lat,lon")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{line}: expected 3 fields")
            try:
                out.append(StationMeta(row[0].strip(), _number(row[1], path, line, "lat"),
                                       _number(row[2], path, line, "lon")))
            except ValueError as err:
                raise DataError(f"{path}:{line}: {err}") from None
    ids = [m.entity_id for m in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate station ids")
    return out


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance on a sphere of radius 6371 km."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def nearest_stations(meta, entity_id, k: int = 10) -> list:
    """``k`` station ids by distance from ``entity_id``, itself first.

    Equal distances are ordered by entity id.
    """
    meta = list(meta)
    ids = [m.entity_id for m in meta]
    if entity_id not in ids:
        raise KeyError(f"no metadata for {entity_id!r}")
    if not 1 <= k <= len(meta):
        raise ValueError(f"k={k} outside [1, {len(meta)}]")
    me = meta[ids.index(entity_id)]
    lat = np.array([m.latitude for m in meta])
    lon = np.array([m.longitude for m in meta])
    d = haversine_km(me.latitude, me.longitude, lat, lon)
    d[ids.index(entity_id)] = -1.0
    order = sorted(range(len(ids)), key=lambda j: (d[j], ids[j]))
    return [ids[j] for j in order[:k]]


def _meta_for(panel_ids, meta):
    if meta is None:
        return None
    by_id = {m.entity_id: m for m in meta}
    missing = [e for e in panel_ids if e not in by_id]
    if missing:
        raise DataError(f"no station metadata for {missing[:5]}")
    return [by_id[e] for e in panel_ids]


# --------------------------------------------------------------------------
# imputation


@dataclass(frozen=True)
class ImputationResult:
    completed: Panel
    iterations: int
    final_change: float
    rank_used: int
    history: tuple = ()


def _initial_fill(X, observed, ids, meta, time_radius, n_near):
    n, T = X.shape
    out = X.copy()
    if meta is not None:
        k = min(n_near, n)
        near = [[ids.index(e) for e in nearest_stations(meta, ids[i], k)] for i in range(n)]
    else:
        near = [[i] for i in range(n)]
    obs_vals = np.where(observed, X, 0.0)
    row_cnt = observed.sum(axis=1)
    row_mean = np.where(row_cnt > 0, obs_vals.sum(axis=1) / np.maximum(row_cnt, 1), np.nan)
    glob = float(obs_vals.sum() / max(observed.sum(), 1))
    for i, t in zip(*np.nonzero(~observed)):
        lo, hi = max(0, t - time_radius), min(T, t + time_radius + 1)
        rows = near[i]
        block = observed[rows, lo:hi]
        if block.any():
            out[i, t] = float(X[rows, lo:hi][block].mean())
        elif np.isfinite(row_mean[i]):
            out[i, t] = row_mean[i]
        else:
            out[i, t] = glob
    return out


def impute_em(panel: Panel, r: int, tol: float = 1e-6, max_iter: int = 1000, meta=None,
              time_radius: int = 3, n_near: int = 5) -> ImputationResult:
    """Fill missing entries by alternating a rank-``r`` principal-components
    fit with replacement of the missing entries by the fitted common component.

    Missing entries start at the mean of observed values within
    ``time_radius`` ticks at the ``n_near`` nearest stations (itself
    included; only itself without ``meta``), then the row mean, then the
    global mean. Observed entries are never modified. Stops when the largest
    change of an imputed entry falls below ``tol``.

    ``history`` records the squared reconstruction error on observed entries.
    """
    X = panel.values
    observed = panel.mask
    n, T = X.shape
    if not 1 <= r <= min(n, T):
        raise ValueError(f"rank {r} outside [1, {min(n, T)}]")
    if not observed.any(axis=1).all() or not observed.any(axis=0).all():
        raise PanelError("a row or column has no observed entries")
    miss = ~observed
    filled = _initial_fill(X, observed, list(panel.entity_ids), _meta_for(panel.entity_ids, meta),
                           time_radius, n_near)
    history = []
    change = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        U, s, Vt = np.linalg.svd(filled, full_matrices=False)
        # sqrt(n) U_r (U_r' X / sqrt(n))' = U_r U_r' X
        lam = np.sqrt(n) * U[:, :r]
        F = filled.T @ lam / n
        common = lam @ F.T
        history.append(float(np.sum((X[observed] - common[observed]) ** 2)))
        if not miss.any():
            change = 0.0
            break
        new = common[miss]
        change = float(np.max(np.abs(new - filled[miss])))
        filled[miss] = new
        if change < tol:
            break
    out = np.where(observed, X, filled)
    completed = Panel(out, panel.entity_ids, panel.time_index)
    return ImputationResult(completed, it, change, int(r), tuple(history))


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvaluationPlan:
    """Test periods are inclusive ``(start, end)`` column positions."""

    test_periods: tuple
    horizons: tuple = (1, 2, 3, 4, 5, 6)
    window_length: int = 500
    target_entities: tuple = None

    def __post_init__(self):
        periods = tuple((int(a), int(b)) for a, b in self.test_periods)
        if not periods:
            raise ValueError("need at least one test period")
        if any(b < a for a, b in periods):
            raise ValueError("test period end precedes its start")
        hs = tuple(int(h) for h in self.horizons)
        if not hs or min(hs) < 1:
            raise ValueError("horizons must be at least 1")
        if self.window_length < 2:
            raise ValueError("window length must be at least 2")
        object.__setattr__(self, "test_periods", periods)
        object.__setattr__(self, "horizons", hs)
        if self.target_entities is not None:
            object.__setattr__(self, "target_entities", tuple(self.target_entities))

    def origins(self, period: int) -> list:
        """``(origin, horizons)`` pairs whose targets fall in the period."""
        a, b = self.test_periods[period]
        out = {}
        for h in self.horizons:
            for t in range(a - h, b - h + 1):
                out.setdefault(t, []).append(h)
        return sorted((t, tuple(sorted(hs))) for t, hs in out.items())

    def validate(self, T: int) -> None:
        for p, (a, b) in enumerate(self.test_periods):
            first = self.origins(p)[0][0]
            if first - self.window_length + 1 < 0:
                raise ValueError(f"period {p + 1}: first window starts before the data")
            if b >= T:
                raise ValueError(f"period {p + 1} ends after the data ({b} >= {T})")


@dataclass(frozen=True)
class EvaluationConfig:
    grid: QuantileGrid = QuantileGrid()
    r_max: int = 20
    n_neighbors: int = 10
    r_samples: int = 5
    weight_mode: str = "markov"
    p_max: int = 6
    q_max: int = 6
    max_failure_fraction: float = 0.01
    warm_start: bool = False
    impute_rank: int = None
    standardize: bool = False
    qfm_opts: QfmOptions = None


@dataclass
class ForecastReport:
    """Forecast records ``(entity_id, period, h, method, origin, forecast, actual)``."""

    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    attempts: int = 0
    factor_counts: dict = field(default_factory=dict)
    transitions: dict = field(default_factory=dict)
    periods: tuple = ()

    def _groups(self, keyf):
        acc = {}
        for rec in self.records:
            e, p, h, m, _, f, a = rec
            s = acc.setdefault(keyf(rec), [0.0, 0])
            s[0] += abs(f - a)
            s[1] += 1
        return acc

    def mae_table(self) -> list:
        """Rows ``(entity_id, period, h, method, mae, n_forecasts)``."""
        acc = self._groups(lambda r: (r[0], r[1], r[2], r[3]))
        return [(e, p, h, m, s / c, c) for (e, p, h, m), (s, c) in acc.items()]

    def aggregate(self) -> dict:
        """``{(period, h, method): (mae, n_forecasts)}`` over all entities."""
        acc = self._groups(lambda r: (r[1], r[2], r[3]))
        return {k: (s / c, c) for k, (s, c) in sorted(acc.items())}

    def methods(self) -> list:
        return list(dict.fromkeys(r[3] for r in self.records))

    def station_bands(self, method: str, cuts=(0.2, 0.4, 0.6, 0.8)) -> dict:
        """Per-station overall MAE, the MAE quantile cut points and each
        station's band index (0 = lowest-error band)."""
        acc = self._groups(lambda r: (r[0], r[3]))
        mae = {e: s / c for (e, m), (s, c) in acc.items() if m == method}
        if not mae:
            return {"mae": {}, "cuts": np.array([]), "band": {}}
        vals = np.array(list(mae.values()))
        q = np.quantile(vals, cuts)
        return {"mae": mae, "cuts": q,
                "band": {e: int(np.searchsorted(q, v, side="right")) for e, v in mae.items()}}


def _window(values, origin, W, config):
    V = np.array(values[:, origin - W + 1:origin + 1], dtype=float)
    if not np.all(np.isfinite(V)):
        if config.impute_rank is None:
            raise PanelError("training window has missing entries")
        V = impute_em(Panel.from_array(V), config.impute_rank).completed.values.copy()
    return V


def select_counts(values, origin: int, window_length: int, config: EvaluationConfig) -> tuple:
    """Quantile factor count per level, averaged over ``config.r_samples``
    evenly spaced origins in the half window ending at ``origin``.

    Each count comes from the information criterion on the whole panel
    (target included); the average is rounded half up.
    """
    W = window_length
    n = values.shape[0]
    lo = max(W - 1, origin - W // 2)
    samples = sorted(set(np.linspace(lo, origin, config.r_samples).round().astype(int)))
    r_max = max(1, min(config.r_max, int(min(n, W) // 2)))
    per_tau = []
    for tau in config.grid:
        chosen = [select_r_quantile(_window(values, t, W, config), tau, r_max,
                                    opts=config.qfm_opts).chosen_r for t in samples]
        per_tau.append(int(math.floor(np.mean(chosen) + 0.5)))
    return tuple(per_tau)


def _periodic_counts(values, plan: EvaluationPlan, config: EvaluationConfig) -> dict:
    """Counts per period, sampled no later than the period's first origin."""
    return {p: select_counts(values, plan.origins(p)[0][0], plan.window_length, config)
            for p in range(len(plan.test_periods))}


def _neighbor_states(y, decs, grid, h, state_map):
    """State path of a neighbour series from quantile regressions of
    ``y_{t+h}`` on ``(1, factors_t, y_t)`` at every level."""
    W = y.size
    fitted = []
    for tau, dec in zip(grid, decs):
        Z = np.column_stack([np.ones(W), dec.factors, y])
        beta, _ = qr_batch(Z[:W - h], y[h:][None, :], tau)
        fitted.append(Z[:W - h] @ beta[0])
    return assign_states(y[h:], np.column_stack(fitted), state_map)


def forecast_origin(values, i: int, origin: int, horizons, methods, window_length: int,
                    r_tau=None, config: EvaluationConfig = EvaluationConfig(),
                    neighbors=None, transitions=None,
                    warm: dict | None = None) -> dict:
    """Forecasts of entity ``i`` for every horizon from one origin.

    Only columns ``origin - window_length + 1 .. origin`` of ``values`` are
    read. ``neighbors`` lists row indices by distance with ``i`` first
    (defaults to row order). A ``warm`` dict carries the quantile factor
    fits of the previous call as starting values for this one. Returns
    ``{(method, h): forecast}``.
    """
    W = window_length
    if origin - W + 1 < 0 or origin >= values.shape[1]:
        raise ValueError("window does not fit inside the data")
    V = _window(values, origin, W, config)
    n = V.shape[0]
    y = V[i]
    Xp = np.delete(V, i, axis=0)
    if config.standardize:
        sd = Xp.std(axis=1, keepdims=True)
        Xp = (Xp - Xp.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
    if neighbors is None:
        neighbors = [i] + [j for j in range(n) if j != i]
    out = {}
    if "naive" in methods:
        for h in horizons:
            out[("naive", h)] = float(y[-1])
    if "ar" in methods:
        ar = fit_ar_aic(y, config.p_max)
        for h in horizons:
            out[("ar", h)] = forecast_ar(ar, y, h)
    if "arima" in methods:
        am = fit_arima(y, config.p_max, config.q_max)
        for h in horizons:
            out[("arima", h)] = forecast_arima(am, y, h)
    if "sw2002" in methods or "near" in methods:
        Xc = Xp - Xp.mean(axis=1, keepdims=True)
        r_sw = select_r_bai_ng(Xc, max(1, min(config.r_max, int(min(Xp.shape) // 2)))).chosen_r
        for h in horizons:
            if "sw2002" in methods:
                out[("sw2002", h)] = fit_sw2002(Xp, y, h, r_sw).forecast()
            if "near" in methods:
                nb = [j for j in neighbors if j != i][:r_sw]
                out[("near", h)] = fit_near_stations(y, V[nb], h).forecast()
    quant = [m for m in ("proposed", "extended") if m in methods]
    if quant:
        grid = config.grid
        state_map = StateMap.for_grid(grid)
        if r_tau is None:
            raise ValueError("quantile methods need per-level factor counts")
        decs = []
        for l, (tau, r) in enumerate(zip(grid, r_tau)):
            prev = warm.get((i, l)) if warm is not None else None
            if prev is not None and prev.r != r:
                prev = None
            decs.append(fit_quantile_factors(Xp, tau, r, config.qfm_opts, init=prev))
            if warm is not None:
                warm[(i, l)] = decs[-1]
        near = neighbors[:config.n_neighbors]
        for h in horizons:
            others = [_neighbor_states(V[j], decs, grid, h, state_map) for j in near if j != i]
            for m in quant:
                if m == "proposed":
                    model = fit_quantile_forecaster(Xp, y, h, grid, r_tau, state_map, factors=decs)
                else:
                    model = fit_extended_forecaster(Xp, y, h, grid, r_tau, state_map=state_map,
                                                    factors=decs)
                P = estimate_transition([model.state_history] + others, h, state_map.n_states,
                                        fallback=state_map.masses)
                model = model.with_transition(P)
                out[(m, h)] = model.forecast(config.weight_mode).point
                if transitions is not None:
                    transitions[(m, h)] = P
    return out


def _evaluate_target(job):
    """All origins of one target entity; origins run in time order so a warm
    start can carry over between consecutive origins."""
    values, ids, neighbors, plan, methods, config, counts, e = job
    i = ids.index(e)
    out = {"records": [], "failures": [], "transitions": {}, "attempts": 0}
    warm = {} if config.warm_start else None
    for p in range(len(plan.test_periods)):
        r_tau = counts.get(p)
        for origin, hs in plan.origins(p):
            out["attempts"] += 1
            trans = {}
            try:
                fc = forecast_origin(values, i, origin, hs, methods, plan.window_length, r_tau,
                                     config, neighbors, transitions=trans, warm=warm)
            except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as err:
                log.warning("forecast failed for %s at origin %d: %r", e, origin, err)
                out["failures"].append((e, origin, repr(err)))
                continue
            for (m, h), f in fc.items():
                actual = float(values[i, origin + h])
                if np.isfinite(actual):
                    out["records"].append((e, p + 1, h, m, origin, float(f), actual))
            for (m, h), P in trans.items():
                out["transitions"][(e, origin, h, m)] = P
    return out


def run_evaluation(panel: Panel, meta, plan: EvaluationPlan, method_set,
                   config: EvaluationConfig = EvaluationConfig(), workers: int = 1) -> ForecastReport:
    """Rolling-origin evaluation over every test period, horizon and target.

    Targets are independent and run in parallel when ``workers > 1``; the
    report does not depend on the worker count. Failed (entity, origin)
    forecasts are logged and excluded; more than
    ``config.max_failure_fraction`` of them raises :class:`EvaluationError`.

    The panel must be complete unless ``config.impute_rank`` is set, in
    which case each training window is imputed on its own and targets whose
    realized value is missing are not scored.
    """
    if config.impute_rank is None:
        values = panel.require_complete()
    else:
        values = np.where(panel.mask, panel.values, np.nan)
    n, T = values.shape
    plan.validate(T)
    methods = tuple(method_set)
    unknown = set(methods) - set(PIPELINE_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    ids = list(panel.entity_ids)
    targets = list(plan.target_entities) if plan.target_entities is not None else ids
    missing = [e for e in targets if e not in ids]
    if missing:
        raise DataError(f"target entities not in the panel: {missing[:5]}")
    meta_rows = _meta_for(ids, meta) if meta is not None else None
    quant = any(m in methods for m in ("proposed", "extended"))
    counts = {}
    if quant:
        counts = _periodic_counts(values, plan, config)
    jobs = []
    for e in targets:
        i = ids.index(e)
        if meta_rows is not None:
            nb = [ids.index(x) for x in nearest_stations(meta_rows, e, n)]
        else:
            nb = [i] + [j for j in range(n) if j != i]
        jobs.append((values, ids, nb, plan, methods, config, counts, e))
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_evaluate_target, jobs))
    else:
        results = [_evaluate_target(job) for job in jobs]
    report = ForecastReport(periods=plan.test_periods)
    report.factor_counts = {p + 1: c for p, c in counts.items()}
    for res in results:
        report.records.extend(res["records"])
        report.failures.extend(res["failures"])
        report.transitions.update(res["transitions"])
        report.attempts += res["attempts"]
    if report.attempts and len(report.failures) > config.max_failure_fraction * report.attempts:
        raise EvaluationError(f"{len(report.failures)} of {report.attempts} forecasts failed")
    return report


def forecast_latest(panel: Panel, meta, horizons, window_length: int, method_set,
                    config: EvaluationConfig = EvaluationConfig(), targets=None) -> list:
    """Forecasts from the last tick of a complete panel.

    Returns rows ``(entity_id, origin_time, h, method, forecast)``.
    """
    values = panel.require_complete()
    n, T = values.shape
    origin = T - 1
    if origin - window_length + 1 < 0:
        raise ValueError("window is longer than the panel")
    methods = tuple(method_set)
    unknown = set(methods) - set(PIPELINE_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    ids = list(panel.entity_ids)
    targets = list(targets) if targets is not None else ids
    meta_rows = _meta_for(ids, meta) if meta is not None else None
    quant = any(m in methods for m in ("proposed", "extended"))
    r_tau = select_counts(values, origin, window_length, config) if quant else None
    rows = []
    for e in targets:
        i = ids.index(e)
        if meta_rows is not None:
            nb = [ids.index(x) for x in nearest_stations(meta_rows, e, n)]
        else:
            nb = [i] + [j for j in range(n) if j != i]
        fc = forecast_origin(values, i, origin, tuple(horizons), methods, window_length, r_tau,
                             config, nb)
        t0 = panel.time_index[origin]
        rows.extend((e, t0.item(), h, m, float(f)) for (m, h), f in sorted(fc.items(),
                                                                    key=lambda kv: (kv[0][1], kv[0][0])))
    return rows


# --------------------------------------------------------------------------
# export


CSV_COLUMNS = ("entity_id", "period", "h", "method", "mae", "n_forecasts")


def report_csv(report: ForecastReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for e, p, h, m, mae, c in report.mae_table():
        w.writerow([e, p, h, m, repr(float(mae)), c])
    return buf.getvalue()


def report_markdown(report: ForecastReport) -> str:
    """One table per period: methods as rows, horizons as columns, aggregate
    MAE with the lowest value per column in bold."""
    agg = report.aggregate()
    methods = report.methods()
    out = []
    for p in sorted({k[0] for k in agg}):
        hs = sorted({k[1] for k in agg if k[0] == p})
        out.append(f"### Period {p}\n")
        out.append("| method | " + " | ".join(f"h={h}" for h in hs) + " |")
        out.append("|---|" + "---|" * len(hs))
        best = {h: min(agg[(p, h, m)][0] for m in methods if (p, h, m) in agg) for h in hs}
        for m in methods:
            cells = []
            for h in hs:
                if (p, h, m) not in agg:
                    cells.append("")
                    continue
                v = agg[(p, h, m)][0]
                cells.append(f"**{v:.3f}**" if v == best[h] else f"{v:.3f}")
            out.append(f"| {m} | " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)


def export_report(report: ForecastReport, path, fmt: str = "csv") -> None:
    """Write the per-(entity, period, h, method) MAE table as CSV or the
    per-period aggregate tables as markdown."""
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "markdown":
        text = report_markdown(report)
    else:
        raise ValueError("format must be 'csv' or 'markdown'")
    with open(path, "w", newline="") as fh:
        fh.write(text)


def read_report_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(r["entity_id"], int(r["period"]), int(r["h"]), r["method"], float(r["mae"]),
                 int(r["n_forecasts"])) for r in reader]


# --------------------------------------------------------------------------
# configuration files


def _parse_periods(text):
    periods = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        a, _, b = part.partition("-")
        periods.append((int(a), int(b)))
    return tuple(periods)


def _ints(text):
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    return cp


def plan_from_config(cp: configparser.ConfigParser, section: str = "plan", **overrides) -> EvaluationPlan:
    """Build a plan from ``[plan]`` keys ``test_periods``, ``horizons``,
    ``window_length`` and ``targets``; keyword overrides win."""
    s = cp[section] if cp.has_section(section) else {}
    kw = {}
    if "test_periods" in s:
        kw["test_periods"] = _parse_periods(s["test_periods"])
    if "horizons" in s:
        kw["horizons"] = _ints(s["horizons"])
    if "window_length" in s:
        kw["window_length"] = int(s["window_length"])
    if s.get("targets", "").strip():
        kw["target_entities"] = tuple(x.strip() for x in s["targets"].split(",") if x.strip())
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if "test_periods" not in kw:
        raise ValueError("the plan needs test_periods")
    return EvaluationPlan(**kw)


def config_from_file(cp: configparser.ConfigParser, section: str = "model", **overrides) -> EvaluationConfig:
    """Build an :class:`EvaluationConfig` from ``[model]`` keys ``levels``,
    ``r_max``, ``neighbors``, ``r_samples``, ``weights``, ``p_max``,
    ``q_max``, ``max_failure_fraction``, ``warm_start``, ``standardize`` and
    ``impute_rank``."""
    s = cp[section] if cp.has_section(section) else {}
    kw = {}
    if "levels" in s:
        kw["grid"] = QuantileGrid(tuple(float(x) for x in s["levels"].split(",")))
    for key, name, conv in (("r_max", "r_max", int), ("neighbors", "n_neighbors", int),
                            ("r_samples", "r_samples", int), ("weights", "weight_mode", str),
                            ("p_max", "p_max", int), ("q_max", "q_max", int),
                            ("max_failure_fraction", "max_failure_fraction", float)):
        if key in s:
            kw[name] = conv(s[key])
    for key, name in (("warm_start", "warm_start"), ("standardize", "standardize")):
        if key in s:
            kw[name] = s.getboolean(key)
    if s.get("impute_rank", "").strip():
        kw["impute_rank"] = int(s["impute_rank"])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return EvaluationConfig(**kw)
