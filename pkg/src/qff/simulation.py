"""Monte Carlo experiments on a three-factor panel with AR(1) factors.

Each replication draws its data from its own :class:`~qff.core.RngStream`
(``stream_id`` = replication index), so results do not depend on the order
or process in which replications run.
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import fit_ar_aic, fit_arima, forecast_ar, forecast_arima, forecast_naive
from .core import Panel, QuantileGrid, RngStream, SeriesWindow, adjusted_r_squared
from .factors import fit_pca_factors, fit_quantile_factors
from .forecasting import fit_extended_forecaster, fit_quantile_forecaster, fit_sw2002

log = logging.getLogger(__name__)

AR_COEFS = np.array([0.8, 0.5, 0.2])
DISTRIBUTIONS = ("normal", "t2", "gamma", "mixed")
METHODS = ("naive", "ar", "arima", "sw2002", "proposed", "extended")
MAX_DROP_FRACTION = 0.05
_ALIASES = {"normal": "normal", "n": "normal", "gaussian": "normal", "normal(0,1)": "normal",
            "t2": "t2", "t": "t2", "student_t(2)": "t2", "t(2)": "t2",
            "gamma": "gamma", "g": "gamma", "gamma(1,5)": "gamma",
            "mixed": "mixed", "mixed_half_t_half_gamma": "mixed"}


class SimulationError(RuntimeError):
    """Too many replications failed."""


def canonical_dist(name: str) -> str:
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown error distribution {name!r}; choose from {DISTRIBUTIONS}") from None


@dataclass(frozen=True)
class SimulationConfig:
    """One experiment cell.

    ``target_error_dist`` defaults to ``error_dist`` (``gamma`` when the
    panel errors are ``mixed``). ``noise_scale`` multiplies every error draw;
    0 gives the noiseless panel.
    """

    n: int = 100
    T: int = 100
    error_dist: str = "normal"
    target_error_dist: str = None
    replications: int = 500
    seed: int = 0
    methods: tuple = METHODS[:5]
    grid: QuantileGrid = QuantileGrid()
    h: int = 1
    r: int = 3
    noise_scale: float = 1.0
    lambda_grid: tuple = None

    def __post_init__(self):
        if self.n < 1 or self.T < 1:
            raise ValueError("n and T must be positive")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if self.h < 1:
            raise ValueError("horizon must be at least 1")
        dist = canonical_dist(self.error_dist)
        tdist = self.target_error_dist
        if tdist is None:
            tdist = "gamma" if dist == "mixed" else dist
        tdist = canonical_dist(tdist)
        if tdist == "mixed":
            raise ValueError("the target error cannot be mixed")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        object.__setattr__(self, "error_dist", dist)
        object.__setattr__(self, "target_error_dist", tdist)
        object.__setattr__(self, "methods", tuple(self.methods))

    @property
    def key(self) -> tuple:
        return (self.n, self.T, self.error_dist)


@dataclass(frozen=True)
class TrueFactors:
    factors: np.ndarray      # (T + h) x 3
    loadings: np.ndarray     # n x 3

    @property
    def f1(self):
        return self.factors[:, 0]

    @property
    def f2(self):
        return self.factors[:, 1]

    @property
    def f3(self):
        return self.factors[:, 2]


def _draw(gen, dist, size):
    if dist == "normal":
        return gen.standard_normal(size)
    if dist == "t2":
        return gen.standard_t(2, size)
    if dist == "gamma":
        return gen.gamma(1.0, 5.0, size)
    raise ValueError(dist)


def generate_panel(config: SimulationConfig, rng: RngStream):
    """Draw ``(Panel, TrueFactors, SeriesWindow)``.

    The panel covers ticks ``0..T-1``; factors and target run ``h`` ticks
    further so the last target value is the one to forecast.
    """
    n, T, h = config.n, config.T, config.h
    L = T + h
    g_fac, g_load, g_panel, g_split, g_target = (rng.child(i).generator() for i in range(5))
    f = np.empty((L, 3))
    f[0] = g_fac.standard_normal(3) / np.sqrt(1.0 - AR_COEFS ** 2)
    eps = g_fac.standard_normal((L - 1, 3))
    for t in range(1, L):
        f[t] = AR_COEFS * f[t - 1] + eps[t - 1]
    lam = g_load.standard_normal((n, 3))
    if config.error_dist == "mixed":
        rows_t = np.sort(g_split.permutation(n)[:n // 2])
        u = _draw(g_panel, "gamma", (n, T))
        u[rows_t] = _draw(g_panel, "t2", (rows_t.size, T))
    else:
        u = _draw(g_panel, config.error_dist, (n, T))
    e = _draw(g_target, config.target_error_dist, L)
    s = config.noise_scale
    X = lam @ f[:T].T + s * u
    y = f.sum(axis=1) + s * e
    panel = Panel.from_array(X)
    return panel, TrueFactors(f, lam), SeriesWindow(y)


def synthetic_stations(n: int = 30, T: int = 1200, dist: str = "normal", seed: int = 0,
                       noise_scale: float = 1.0):
    """Station panel from the factor DGP with random coordinates.

    Every row follows the three-factor recursion plus errors from ``dist``;
    stations are scattered uniformly over a 3 x 3 degree box. Returns
    ``(Panel, list of StationMeta)``.
    """
    from .pipeline import StationMeta

    cfg = SimulationConfig(n=n, T=T, error_dist=dist, replications=1, seed=seed,
                           noise_scale=noise_scale)
    rng = RngStream(seed, 0)
    panel, _, _ = generate_panel(cfg, rng)
    g = rng.child(9).generator()
    lat = 35.0 + 3.0 * g.random(n)
    lon = 126.0 + 3.0 * g.random(n)
    ids = [f"s{i:03d}" for i in range(n)]
    panel = Panel(panel.values, ids, np.arange(T))
    return panel, [StationMeta(e, float(a), float(b)) for e, a, b in zip(ids, lat, lon)]


# --------------------------------------------------------------------------
# reports


@dataclass
class ExperimentReport:
    """Cell statistics plus the per-replication values behind them.

    ``values[(n, T, dist)][name]`` holds the per-replication series (paired
    across methods within a cell).
    """

    experiment: str
    values: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=dict)
    max_abs_error: dict = field(default_factory=dict)
    statistic: str = "mae"

    def cells(self):
        return list(self.values)

    def names(self, cell):
        return list(self.values[cell])

    def mean(self, cell, name) -> float:
        return float(np.mean(self.values[cell][name]))

    def stderr(self, cell, name) -> float:
        v = np.asarray(self.values[cell][name], dtype=float)
        return float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")

    def rows(self):
        out = []
        for cell in self.cells():
            n, T, dist = cell
            for name in self.names(cell):
                out.append((n, T, dist, name, self.statistic, self.mean(cell, name),
                            self.stderr(cell, name)))
            out.append((n, T, dist, "all", "dropped", float(self.dropped.get(cell, 0)), float("nan")))
            out.append((n, T, dist, "panel_error", "max_abs_error",
                        float(self.max_abs_error.get(cell, float("nan"))), float("nan")))
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "T", "dist", "method_or_factor", "statistic", "value", "stderr"])
        for n, T, dist, name, stat, val, se in self.rows():
            w.writerow([n, T, dist, name, stat, repr(float(val)), repr(float(se))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_table(self) -> str:
        """Plain-text table: one block per distribution, cells as columns,
        each statistic followed by its standard error in parentheses."""
        lines = []
        for dist in dict.fromkeys(c[2] for c in self.cells()):
            cells = [c for c in self.cells() if c[2] == dist]
            names = list(dict.fromkeys(nm for c in cells for nm in self.names(c)))
            head = f"{'':<14}" + "".join(f"{f'({c[0]},{c[1]})':>12}" for c in cells)
            lines += [f"[{dist}]", head]
            means = {nm: [self.mean(c, nm) if nm in self.values[c] else np.nan for c in cells]
                     for nm in names}
            # mark the best entry per cell: lowest MAE or highest R^2
            pick = np.nanargmin if self.statistic == "mae" else np.nanargmax
            best = [names[pick([means[nm][j] for nm in names])] for j in range(len(cells))]
            for nm in names:
                ses = [self.stderr(c, nm) if nm in self.values[c] else np.nan for c in cells]
                lines.append(f"{nm:<14}" + "".join(
                    f"{('*' if best[j] == nm else '') + f'{v:.3f}':>12}"
                    for j, v in enumerate(means[nm])))
                lines.append(f"{'':<14}" + "".join(f"{f'({s:.3f})':>12}" for s in ses))
            lines.append("")
        return "\n".join(lines)


def _collect(experiment, statistic, configs, worker, workers):
    report = ExperimentReport(experiment, statistic=statistic)
    for cfg in configs:
        jobs = [(cfg, rep) for rep in range(cfg.replications)]
        if workers and workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(worker, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
        else:
            results = [worker(job) for job in jobs]
        kept = [r for r in results if r["ok"]]
        dropped = len(results) - len(kept)
        for r in results:
            if not r["ok"]:
                log.warning("cell %s replication %d dropped: %s", cfg.key, r["rep"], r["error"])
        if dropped > MAX_DROP_FRACTION * len(results):
            raise SimulationError(
                f"cell {cfg.key}: {dropped} of {len(results)} replications failed")
        if not kept:
            raise SimulationError(f"cell {cfg.key}: no replication succeeded")
        names = list(kept[0]["values"])
        report.values[cfg.key] = {nm: np.array([r["values"][nm] for r in kept]) for nm in names}
        report.dropped[cfg.key] = dropped
        report.max_abs_error[cfg.key] = max(r["max_abs_error"] for r in kept)
    return report


def _max_abs_error(panel, truth):
    common = truth.loadings @ truth.factors[:panel.T].T
    return float(np.max(np.abs(panel.values - common)))


def _r2_replication(job):
    cfg, rep = job
    panel, truth, _ = generate_panel(cfg, RngStream(cfg.seed, rep))
    out = {"rep": rep, "ok": True, "error": None, "max_abs_error": _max_abs_error(panel, truth)}
    try:
        X = panel.values
        F_pca = fit_pca_factors(X - X.mean(axis=1, keepdims=True), cfg.r).factors
        F_qfm = np.hstack([fit_quantile_factors(X, tau, cfg.r).factors for tau in cfg.grid])
        vals = {}
        f = truth.factors[:cfg.T]
        for j in range(3):
            vals[f"f{j + 1}:pca"] = adjusted_r_squared(f[:, j], F_pca)
            vals[f"f{j + 1}:qfm"] = adjusted_r_squared(f[:, j], F_qfm)
        out["values"] = vals
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as err:
        out.update(ok=False, error=repr(err))
    return out


def run_r2_experiment(configs, r_mean: int = 3, r_per_tau: int = 3, grid=None,
                      workers: int = 1) -> ExperimentReport:
    """Adjusted R^2 of each true factor on the PCA block (``T x r_mean``) and
    the stacked quantile-factor block (``T x m*r_per_tau``)."""
    if r_mean != r_per_tau:
        # the replication worker uses one count; keep the interface explicit
        raise ValueError("r_mean and r_per_tau must agree")
    configs = [replace(c, r=r_mean, grid=grid or c.grid) for c in configs]
    return _collect("r2", "adj_r2", configs, _r2_replication, workers)


def _mae_replication(job):
    cfg, rep = job
    panel, truth, series = generate_panel(cfg, RngStream(cfg.seed, rep))
    out = {"rep": rep, "ok": True, "error": None, "max_abs_error": _max_abs_error(panel, truth)}
    T, h = cfg.T, cfg.h
    y = series.values[:T]
    truth_y = series.values[T + h - 1]
    X = panel.values
    fc = {}
    method = None
    try:
        for method in cfg.methods:
            if method == "naive":
                fc[method] = forecast_naive(y, h)
            elif method == "ar":
                fc[method] = forecast_ar(fit_ar_aic(y, 6), y, h)
            elif method == "arima":
                fc[method] = forecast_arima(fit_arima(y, 6, 6), y, h)
            elif method == "sw2002":
                fc[method] = fit_sw2002(X, y, h, cfg.r).forecast()
        if "proposed" in cfg.methods or "extended" in cfg.methods:
            method = "proposed"
            prop = fit_quantile_forecaster(X, y, h, cfg.grid, cfg.r)
            if "proposed" in cfg.methods:
                fc["proposed"] = prop.forecast("interval").point
            if "extended" in cfg.methods:
                method = "extended"
                sel = "holdout" if cfg.lambda_grid is None else list(cfg.lambda_grid)
                ext = fit_extended_forecaster(X, y, h, cfg.grid, cfg.r, sel,
                                              factors=[lv.decomposition for lv in prop.per_level])
                fc["extended"] = ext.forecast("interval").point
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as err:
        out.update(ok=False, error=f"{method}: {err!r}")
        return out
    if not all(np.isfinite(v) for v in fc.values()):
        out.update(ok=False, error="non-finite forecast")
        return out
    out["values"] = {m: abs(fc[m] - truth_y) for m in cfg.methods}
    return out


def run_mae_experiment(configs, workers: int = 1) -> ExperimentReport:
    """Mean absolute one-step forecast error per method, paired within replications."""
    return _collect("mae", "mae", list(configs), _mae_replication, workers)


def run_extension_experiment(configs, workers: int = 1) -> ExperimentReport:
    """MAE experiment with half t(2) / half Gamma(1,5) panel errors and
    Gamma(1,5) target errors, including the group-LASSO forecaster."""
    fixed = []
    for c in configs:
        methods = tuple(dict.fromkeys(tuple(c.methods) + ("proposed", "extended")))
        fixed.append(replace(c, error_dist="mixed", target_error_dist="gamma", methods=methods))
    report = _collect("extension", "mae", fixed, _mae_replication, workers)
    return report


def pooled_stderr(report: ExperimentReport, cell, a: str, b: str) -> float:
    """``sqrt((se_a^2 + se_b^2) / 2)``."""
    return float(np.sqrt((report.stderr(cell, a) ** 2 + report.stderr(cell, b) ** 2) / 2.0))
