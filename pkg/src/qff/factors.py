"""Mean factors by principal components, quantile factors by alternating
quantile regressions, and information criteria for the number of factors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Panel, PanelError, _check_tau, center_rows, check_loss
from .quantreg import qr_batch


@dataclass
class FactorDecomposition:
    """Factors ``F`` (T x r) and loadings (n x r) with ``F'F / T = I``.

    ``level`` is ``"mean"`` for principal components or the quantile level.
    ``intercepts`` holds per-entity offsets when the quantile fit used them.
    """

    factors: np.ndarray
    loadings: np.ndarray
    level: object
    objective: float
    intercepts: np.ndarray = None
    iterations: int = 0
    converged: bool = True
    history: list = field(default_factory=list, repr=False)

    @property
    def r(self) -> int:
        return self.factors.shape[1]

    def common_component(self) -> np.ndarray:
        C = self.loadings @ self.factors.T
        if self.intercepts is not None:
            C = C + self.intercepts[:, None]
        return C


@dataclass
class IcCurve:
    r_values: np.ndarray
    ic_values: np.ndarray
    losses: np.ndarray
    chosen_r: int


@dataclass
class QfmOptions:
    tol: float = 1e-6
    max_iter: int = 100
    inner_tol: float = 1e-6
    intercept: bool = True
    iters_per_stage: int = 2
    start_factor: float = 0.5
    robust_start: bool = True


def ic_penalty(n, T) -> float:
    """``g(n, T) = (n + T) / (n T) * ln(n T / (n + T))``."""
    return (n + T) / (n * T) * np.log(n * T / (n + T))


def _check_r(r, n, T):
    if not 1 <= r <= min(n, T):
        raise ValueError(f"factor count {r} outside [1, {min(n, T)}]")


def _as_matrix(panel):
    if isinstance(panel, Panel):
        return panel.require_complete()
    X = np.asarray(panel, dtype=float)
    if X.ndim != 2:
        raise PanelError("panel values must be 2-d")
    return X


def _normalize(Lam, F):
    """Rotate so that ``F'F/T = I`` with columns ordered by singular value."""
    T = F.shape[0]
    r = F.shape[1]
    # thin SVD of the rank-r common component via QR of both factors
    qf, rf = np.linalg.qr(F)
    ql, rl = np.linalg.qr(Lam)
    u, s, vt = np.linalg.svd(rl @ rf.T)
    Fn = np.sqrt(T) * (qf @ vt.T)
    Ln = (ql @ u) * s / np.sqrt(T)
    # deterministic signs: largest loading of each factor is positive
    idx = np.argmax(np.abs(Ln), axis=0)
    sign = np.sign(Ln[idx, np.arange(r)])
    sign[sign == 0] = 1.0
    return Ln * sign, Fn * sign


def fit_pca_factors(panel, r: int) -> FactorDecomposition:
    """Principal-components factors of a complete (centered) panel.

    Loadings are ``sqrt(n)`` times the top ``r`` eigenvectors of ``X X'`` and
    factors ``X' Lambda / n``; columns are then rescaled so that
    ``F'F / T = I`` (the common component is unchanged). ``objective`` is the
    mean squared residual ``V(F, Lambda)``.
    """
    X = _as_matrix(panel)
    if not np.all(np.isfinite(X)):
        raise PanelError("panel contains non-finite entries")
    n, T = X.shape
    _check_r(r, n, T)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    Lam = np.sqrt(n) * U[:, :r]
    F = X.T @ Lam / n
    scale = np.sqrt(np.sum(F * F, axis=0) / T)
    scale[scale == 0] = 1.0
    F = F / scale
    Lam = Lam * scale
    idx = np.argmax(np.abs(Lam), axis=0)
    sign = np.sign(Lam[idx, np.arange(r)])
    sign[sign == 0] = 1.0
    F, Lam = F * sign, Lam * sign
    resid = X - Lam @ F.T
    return FactorDecomposition(F, Lam, "mean", float(np.mean(resid ** 2)))


def _qfm_objective(X, Lam, F, alpha, tau):
    fit = Lam @ F.T
    if alpha is not None:
        fit = fit + alpha[:, None]
    return float(np.mean(check_loss(X - fit, tau)))


def fit_quantile_factors(panel, tau: float, r: int, opts: QfmOptions | None = None,
                         init: FactorDecomposition | None = None) -> FactorDecomposition:
    """Quantile factor model fitted by alternating quantile regressions.

    Given factors, each entity's loadings (and offset, when
    ``opts.intercept``) come from a quantile regression of its row on the
    factors; given loadings, each period's factors come from a quantile
    regression of that column on the loadings. A block update is kept only
    for the rows/columns whose check loss decreases, so the objective
    ``M(F, Lambda)`` is nonincreasing across sweeps. Iteration stops when the
    relative decrease in a sweep falls below ``opts.tol`` or after
    ``opts.max_iter`` sweeps; an unconverged fit is returned with
    ``converged=False``.

    Without ``init`` the fit runs from two starts, the principal components
    of the row-centered panel and of the panel with each row clipped to its
    median plus or minus 2.5 scaled MADs, and keeps the lower objective. The
    second start guards against components driven by a few extreme entries
    under heavy tails; ``opts.robust_start=False`` uses only the first.
    ``init`` restarts from a previous decomposition's
    loadings (e.g. the fit on an overlapping window).
    """
    _check_tau(tau)
    opts = opts or QfmOptions()
    X = _as_matrix(panel)
    if not np.all(np.isfinite(X)):
        raise PanelError("panel contains non-finite entries")
    n, T = X.shape
    _check_r(r, n, T)

    if init is not None:
        if init.r != r or init.loadings.shape[0] != n:
            raise ValueError("warm start does not match panel size / factor count")
        Lam = init.loadings.copy()
        alpha = None
        if opts.intercept:
            alpha = init.intercepts.copy() if init.intercepts is not None else np.zeros(n)
        # factors for the new window from the stored loadings
        Xa = X - (alpha[:, None] if alpha is not None else 0.0)
        F, _ = qr_batch(Lam, Xa.T, tau, tol=opts.inner_tol,
                        iters_per_stage=opts.iters_per_stage)
        return _alternate(X, Lam, F, alpha, tau, opts)

    best = None
    sources = [X]
    if opts.robust_start:
        Z = _clip_rows(X)
        if not np.array_equal(Z, X):
            sources.append(Z)
    for k, Z in enumerate(sources):
        try:
            start = fit_pca_factors(Z - Z.mean(axis=1, keepdims=True), r)
        except (PanelError, ValueError, np.linalg.LinAlgError):
            if k == 0:
                raise
            continue
        F = start.factors.copy()
        Lam = start.loadings.copy()
        alpha = np.quantile(X - Lam @ F.T, tau, axis=1) if opts.intercept else None
        fit = _alternate(X, Lam, F, alpha, tau, opts)
        if best is None or fit.objective < best.objective:
            best = fit
    return best


def _clip_rows(X, c: float = 2.5):
    """Clip each row to its median plus or minus ``c`` scaled MADs."""
    med = np.median(X, axis=1, keepdims=True)
    mad = 1.4826 * np.median(np.abs(X - med), axis=1, keepdims=True)
    mad = np.where(mad > 0, mad, np.inf)
    return np.clip(X, med - c * mad, med + c * mad)


def _alternate(X, Lam, F, alpha, tau, opts):
    n, T = X.shape
    ones = np.ones((T, 1))
    obj = _qfm_objective(X, Lam, F, alpha, tau)
    history = [obj]
    converged = False
    sweep = 0
    for sweep in range(1, opts.max_iter + 1):
        # loadings step: one regression per entity on [1, F]
        D = np.hstack([ones, F]) if opts.intercept else F
        b0 = np.hstack([alpha[:, None], Lam]) if opts.intercept else Lam
        b, _ = qr_batch(D, X, tau, beta0=b0, tol=opts.inner_tol,
                        iters_per_stage=opts.iters_per_stage, start_factor=opts.start_factor)
        cur = check_loss(X - b0 @ D.T, tau).mean(axis=1)
        new = check_loss(X - b @ D.T, tau).mean(axis=1)
        take = new < cur
        b = np.where(take[:, None], b, b0)
        if opts.intercept:
            alpha, Lam = b[:, 0].copy(), b[:, 1:].copy()
        else:
            Lam = b.copy()

        # factors step: one regression per period on the loadings
        Xa = X - alpha[:, None] if opts.intercept else X
        f, _ = qr_batch(Lam, Xa.T, tau, beta0=F, tol=opts.inner_tol,
                        iters_per_stage=opts.iters_per_stage, start_factor=opts.start_factor)
        cur = check_loss(Xa.T - F @ Lam.T, tau).mean(axis=1)
        new = check_loss(Xa.T - f @ Lam.T, tau).mean(axis=1)
        take = new < cur
        F = np.where(take[:, None], f, F)

        new_obj = _qfm_objective(X, Lam, F, alpha, tau)
        history.append(new_obj)
        rel = (obj - new_obj) / max(abs(obj), 1e-300)
        obj = new_obj
        if rel <= opts.tol:
            converged = True
            break

    if opts.intercept:
        shift = F.mean(axis=0)
        alpha = alpha + Lam @ shift
        F = F - shift
    Lam, F = _normalize(Lam, F)
    obj = _qfm_objective(X, Lam, F, alpha, tau)
    return FactorDecomposition(F, Lam, float(tau), obj, alpha, sweep, converged, history)


def _ic_curve(losses, r_values, n, T):
    losses = np.asarray(losses, dtype=float)
    ic = np.log(np.maximum(losses, 1e-300)) + np.asarray(r_values) * ic_penalty(n, T)
    # argmin takes the first minimum, i.e. the smallest r on ties
    chosen = int(np.asarray(r_values)[int(np.argmin(ic))])
    return IcCurve(np.asarray(r_values), ic, losses, chosen)


def select_r_bai_ng(panel, r_max: int, r_min: int = 1) -> IcCurve:
    """Factor count minimizing ``ln V_r + r g(n, T)`` over principal components."""
    X = _as_matrix(panel)
    n, T = X.shape
    if not 1 <= r_min <= r_max <= min(n, T) / 2:
        raise ValueError(f"r_max must lie in [1, {min(n, T) // 2}]")
    s2 = np.linalg.svd(X, compute_uv=False) ** 2
    r_values = np.arange(r_min, r_max + 1)
    losses = [s2[r:].sum() / (n * T) for r in r_values]
    return _ic_curve(losses, r_values, n, T)


def select_r_quantile(panel, tau: float, r_max: int, r_min: int = 1,
                      opts: QfmOptions | None = None) -> IcCurve:
    """Factor count minimizing ``ln V_r(tau) + r g(n, T)`` over quantile factor fits."""
    X = _as_matrix(panel)
    n, T = X.shape
    if not 1 <= r_min <= r_max <= min(n, T) / 2:
        raise ValueError(f"r_max must lie in [1, {min(n, T) // 2}]")
    r_values = np.arange(r_min, r_max + 1)
    losses = [fit_quantile_factors(X, tau, int(r), opts).objective for r in r_values]
    return _ic_curve(losses, r_values, n, T)
