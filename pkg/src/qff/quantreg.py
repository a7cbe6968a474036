"""Linear quantile regression and group-LASSO penalized quantile regression.

The unpenalized solver runs iteratively reweighted least squares (IRLS) on a
Huber-smoothed check loss whose radius is halved stage by stage, then moves
to an exact vertex of the linear program by simplex-style edge descent. The
result is the exact check-loss minimizer (the problem is a linear program,
so an optimal solution interpolates ``k`` observations).

For the many small regressions inside quantile factor estimation, the
batched routine :func:`qr_batch` solves ``B`` problems that share one design
matrix at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import _check_tau, check_loss, huber_check_grad, huber_check_loss


class QrConvergenceError(RuntimeError):
    """The solver hit its iteration budget; ``best`` holds the best iterate."""

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


@dataclass
class QrOptions:
    tol: float = 1e-8
    max_iter: int = 500
    gamma_start: float = 1.0
    gamma_end: float = 1e-4
    max_pivots: int = 2000


@dataclass
class QrFit:
    coefficients: np.ndarray
    level: float
    objective: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)

    def predict(self, design):
        return np.asarray(design, dtype=float) @ self.coefficients


def _robust_scale(y):
    y = np.asarray(y, dtype=float)
    q75, q25 = np.percentile(y, [75, 25])
    s = (q75 - q25) / 1.349
    if not s > 0:
        s = np.mean(np.abs(y - np.median(y)))
    if not s > 0:
        s = max(np.max(np.abs(y)), 1.0)
    return float(s)


def _validate(design, response, tau):
    _check_tau(tau)
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(response, dtype=float).ravel()
    T, k = X.shape
    if y.size != T:
        raise ValueError(f"design has {T} rows but response has {y.size}")
    if T < k:
        raise ValueError(f"need at least as many observations ({T}) as coefficients ({k})")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("design and response must be finite")
    if np.any(np.all(X == 0, axis=0)):
        raise np.linalg.LinAlgError("design has an all-zero column")
    return X, y


def _huber_rows(U, tau, gamma):
    # rho_tau(u) - w(u) * gamma / 2 + w(u) * max(gamma - |u|, 0)^2 / (2 gamma)
    pos = U >= 0
    w = np.where(pos, tau, 1.0 - tau)
    m = np.maximum(gamma - np.abs(U), 0.0)
    m *= m
    m *= 0.5 / gamma
    m -= 0.5 * gamma
    m *= w
    m += U * (tau - ~pos)
    return m.mean(axis=-1)


def _check_rows(U, tau):
    return (U * (tau - (U < 0))).mean(axis=-1)


def _solve_batch(G, rhs):
    k = G.shape[-1]
    ridge = 1e-12 * (np.trace(G, axis1=-2, axis2=-1) / k + 1e-300)
    G = G + ridge[:, None, None] * np.eye(k)
    try:
        return np.linalg.solve(G, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(rhs)
        for b in range(G.shape[0]):
            out[b] = np.linalg.lstsq(G[b], rhs[b], rcond=None)[0]
        return out


def irls_stage(D, R, tau, beta, gamma, max_iter, tol, P=None, history=None):
    """Minimize the Huberized check loss at a fixed radius for every row of ``R``.

    Each iteration is a weighted least-squares solve followed by step halving
    on rows whose objective would increase, so the per-row objective never
    goes up. Returns ``(beta, iterations, converged)``.
    """
    N, k = D.shape
    if P is None:
        P = (D[:, :, None] * D[:, None, :]).reshape(N, k * k)
    U = R - beta @ D.T
    f = _huber_rows(U, tau, gamma)
    if history is not None:
        history.append(float(f.sum()))
    for it in range(1, max_iter + 1):
        C = np.where(U >= 0, tau, 1.0 - tau) / np.maximum(np.abs(U), gamma)
        G = (C @ P).reshape(-1, k, k)
        target = _solve_batch(G, (C * R) @ D)
        step = target - beta
        t = np.ones(len(beta))
        for _ in range(30):
            cand = beta + t[:, None] * step
            Uc = R - cand @ D.T
            fc = _huber_rows(Uc, tau, gamma)
            worse = fc > f
            if not worse.any():
                break
            t = np.where(worse, 0.5 * t, t)
        keep = fc <= f
        gain = np.where(keep, f - fc, 0.0)
        beta = np.where(keep[:, None], cand, beta)
        U = np.where(keep[:, None], Uc, U)
        f = np.where(keep, fc, f)
        if history is not None:
            history.append(float(f.sum()))
        if np.all(gain <= tol * (1.0 + np.abs(f))):
            return beta, it, True
    return beta, max_iter, False


def _gamma_schedule(start, end, factor=0.5):
    gammas = [start]
    while gammas[-1] * factor >= end * (1 - 1e-12):
        gammas.append(gammas[-1] * factor)
    if gammas[-1] > end:
        gammas.append(end)
    return gammas


@njit(cache=True)
def _huber_row(u, tau, gamma):
    total = 0.0
    for i in range(u.size):
        a = abs(u[i])
        w = tau if u[i] >= 0 else 1.0 - tau
        total += w * (0.5 * a * a / gamma if a <= gamma else a - 0.5 * gamma)
    return total / u.size


@njit(cache=True)
def _chol_solve(G, rhs):
    # G is symmetric positive definite and overwritten by its Cholesky factor
    k = G.shape[0]
    for j in range(k):
        d = G[j, j]
        for p in range(j):
            d -= G[j, p] * G[j, p]
        if d <= 0.0:
            return np.zeros(k) + np.nan
        d = np.sqrt(d)
        G[j, j] = d
        for i in range(j + 1, k):
            v = G[i, j]
            for p in range(j):
                v -= G[i, p] * G[j, p]
            G[i, j] = v / d
    x = rhs.copy()
    for i in range(k):
        for p in range(i):
            x[i] -= G[i, p] * x[p]
        x[i] /= G[i, i]
    for i in range(k - 1, -1, -1):
        for p in range(i + 1, k):
            x[i] -= G[p, i] * x[p]
        x[i] /= G[i, i]
    return x


@njit(cache=True)
def _residuals(D, y, beta, out):
    N, k = D.shape
    for i in range(N):
        acc = y[i]
        for p in range(k):
            acc -= D[i, p] * beta[p]
        out[i] = acc


@njit(cache=True)
def _irls_kernel(D, R, tau, beta0, gammas, iters, tol):
    """Row-by-row version of :func:`irls_stage` run over a radius schedule."""
    B, N = R.shape
    k = D.shape[1]
    out = beta0.copy()
    u = np.empty(N)
    uc = np.empty(N)
    for b in range(B):
        y = R[b]
        beta = out[b].copy()
        _residuals(D, y, beta, u)
        for gamma in gammas:
            f = _huber_row(u, tau, gamma)
            for _ in range(iters):
                G = np.zeros((k, k))
                rhs = np.zeros(k)
                for i in range(N):
                    w = tau if u[i] >= 0 else 1.0 - tau
                    c = w / max(abs(u[i]), gamma)
                    for p in range(k):
                        cp = c * D[i, p]
                        rhs[p] += cp * y[i]
                        for q in range(p + 1):
                            G[p, q] += cp * D[i, q]
                tr = 0.0
                for p in range(k):
                    tr += G[p, p]
                    for q in range(p):
                        G[q, p] = G[p, q]
                for p in range(k):
                    G[p, p] += 1e-12 * tr / k + 1e-300
                step = _chol_solve(G, rhs) - beta
                if not np.all(np.isfinite(step)):
                    break
                t = 1.0
                fc = np.inf
                cand = beta
                for _ in range(30):
                    cand = beta + t * step
                    _residuals(D, y, cand, uc)
                    fc = _huber_row(uc, tau, gamma)
                    if fc <= f:
                        break
                    t *= 0.5
                if fc > f:
                    break
                gain = f - fc
                beta = cand
                u[:] = uc
                f = fc
                if gain <= tol * (1.0 + abs(f)):
                    break
        out[b] = beta
    return out


@njit(cache=True)
def _vertex_row(X, y, tau, beta0, max_pivots):
    """Compiled :func:`vertex_descent` for one response; returns
    ``(beta, optimal)``, or the start unchanged when no basis exists."""
    T, k = X.shape
    u = y - X @ beta0
    order = np.argsort(np.abs(u), kind="mergesort")
    Q = np.zeros((k, k))
    basis = np.empty(k, dtype=np.int64)
    nb = 0
    for i in order:
        v = X[i].copy()
        for _ in range(2):
            for j in range(nb):
                v -= (Q[j] @ v) * Q[j]
        nv = np.sqrt(v @ v)
        if nv > 1e-10 * max(np.sqrt(X[i] @ X[i]), 1e-300):
            Q[nb] = v / nv
            basis[nb] = i
            nb += 1
            if nb == k:
                break
    if nb < k:
        return beta0.copy(), False
    XB = np.empty((k, k))
    yB = np.empty(k)
    for j in range(k):
        XB[j] = X[basis[j]]
        yB[j] = y[basis[j]]
    beta = np.linalg.solve(XB, yB)
    zero_tol = 1e-11 * max(np.max(np.abs(y)), 1e-300)
    isbasic = np.zeros(T, dtype=np.bool_)
    t_hit = np.empty(T)
    for pivot in range(max_pivots + 1):
        u = y - X @ beta
        isbasic[:] = False
        for j in range(k):
            isbasic[basis[j]] = True
        dirs = np.linalg.inv(XB)
        Z = X @ dirs
        base = np.zeros(k)
        znorm = np.zeros(k)
        for i in range(T):
            for j in range(k):
                znorm[j] += abs(Z[i, j])
            if isbasic[i] or abs(u[i]) <= zero_tol:
                continue
            psi = tau - 1.0 if u[i] < 0 else tau
            for j in range(k):
                base[j] -= psi * Z[i, j]
        best_val = 0.0
        bj = -1
        bs = 0.0
        b_rate = 0.0
        for s in (1.0, -1.0):
            own = (1.0 - tau) if s > 0 else tau
            for j in range(k):
                degen = 0.0
                for i in range(T):
                    if isbasic[i] or abs(u[i]) > zero_tol:
                        continue
                    v = -s * Z[i, j]
                    degen += tau * v if v > 0 else (tau - 1.0) * v
                rate = s * base[j] + degen + own
                val = rate / znorm[j]
                if val < best_val:
                    best_val, bj, bs, b_rate = val, j, s, rate
        if bj < 0 or best_val > -1e-12:
            return beta, True
        if pivot == max_pivots:
            break
        n_pos = 0
        for i in range(T):
            z = bs * Z[i, bj]
            t_hit[i] = np.inf
            if isbasic[i] or abs(u[i]) <= zero_tol or abs(z) <= 1e-14:
                continue
            t = u[i] / z
            if t > 0:
                t_hit[i] = t
                n_pos += 1
        if n_pos == 0:
            return beta, True
        ordr = np.argsort(t_hit, kind="mergesort")[:n_pos]
        slope = b_rate
        enter = ordr[n_pos - 1]
        for i in ordr:
            slope += abs(Z[i, bj])
            if slope >= 0:
                enter = i
                break
        beta = beta + t_hit[enter] * bs * dirs[:, bj]
        basis[bj] = enter
        XB[bj] = X[enter]
    return beta, False


@njit(cache=True)
def _vertex_kernel(D, R, tau, beta0, max_pivots):
    B = R.shape[0]
    out = beta0.copy()
    for b in range(B):
        beta, _ = _vertex_row(D, R[b], tau, beta0[b], max_pivots)
        out[b] = beta
    return out


def _vertex_candidates(D, R, beta):
    """Interpolate each row's ``k`` smallest absolute residuals."""
    N, k = D.shape
    U = np.abs(R - beta @ D.T)
    idx = np.argpartition(U, k - 1, axis=1)[:, :k]
    DB = D[idx]                         # B x k x k
    yB = np.take_along_axis(R, idx, axis=1)
    out = beta.copy()
    ok = np.abs(np.linalg.det(DB)) > 1e-10 * np.prod(np.linalg.norm(DB, axis=2), axis=1)
    if ok.any():
        out[ok] = np.linalg.solve(DB[ok], yB[ok][..., None])[..., 0]
    return out


def qr_batch(design, responses, tau, beta0=None, gamma_start=None, gamma_end=None,
             iters_per_stage=3, tol=1e-6, shrink=0.25, start_factor=0.5, exact=True,
             max_pivots=2000):
    """Solve many quantile regressions sharing one design.

    This is the inner solver of the quantile factor iterations: a short
    smoothing schedule, then (with ``exact``) compiled vertex descent from
    the smoothed point, which ends at an exact minimizer of each row.

    Parameters
    ----------
    design : (N, k) array
    responses : (B, N) array, one regression per row
    beta0 : (B, k) warm start, defaults to least squares
    gamma_start, gamma_end : smoothing schedule; defaults derive from the
        spread of the warm-start residuals

    Returns
    -------
    beta : (B, k) array
    objective : (B,) mean check loss of each row
    """
    D = np.asarray(design, dtype=float)
    R = np.atleast_2d(np.asarray(responses, dtype=float))
    N, k = D.shape
    if beta0 is None:
        beta0 = np.linalg.lstsq(D, R.T, rcond=None)[0].T
    beta = np.array(beta0, dtype=float, copy=True)
    U = R - beta @ D.T
    scale = float(np.median(np.abs(U))) if U.size else 1.0
    if not scale > 0:
        scale = 1.0
    gamma_start = start_factor * scale if gamma_start is None else gamma_start
    gamma_end = 1e-3 * scale if gamma_end is None else gamma_end
    best = beta
    f_best = _check_rows(U, tau)
    gammas = np.array(_gamma_schedule(gamma_start, gamma_end, shrink))
    beta = _irls_kernel(np.ascontiguousarray(D), np.ascontiguousarray(R), float(tau),
                        beta, gammas, int(iters_per_stage), float(tol))
    for cand in (beta, _vertex_candidates(D, R, beta)):
        fc = _check_rows(R - cand @ D.T, tau)
        better = fc < f_best
        best = np.where(better[:, None], cand, best)
        f_best = np.where(better, fc, f_best)
    if exact:
        cand = _vertex_kernel(np.ascontiguousarray(D), np.ascontiguousarray(R), float(tau),
                              np.ascontiguousarray(best), int(max_pivots))
        fc = _check_rows(R - cand @ D.T, tau)
        better = fc < f_best
        best = np.where(better[:, None], cand, best)
        f_best = np.where(better, fc, f_best)
    return best, f_best


def _initial_basis(X, u):
    order = np.argsort(np.abs(u), kind="stable")
    T, k = X.shape
    basis = []
    for i in order:
        trial = basis + [int(i)]
        if np.linalg.matrix_rank(X[trial]) == len(trial):
            basis = trial
            if len(basis) == k:
                return basis
    raise np.linalg.LinAlgError("design does not have full column rank")


def vertex_descent(X, y, tau, beta, max_pivots=2000, history=None):
    """Exact check-loss minimization from a starting point by edge descent.

    Starts at the vertex interpolating the ``k`` observations with smallest
    residuals under ``beta``, then walks along edges of the feasible polytope
    (one basic observation leaves, the first breakpoint on the edge enters)
    while the directional derivative is negative.

    Returns ``(beta, pivots, optimal)``.
    """
    T, k = X.shape
    scale = max(float(np.max(np.abs(y))), 1e-300)
    zero_tol = 1e-11 * scale
    basis = _initial_basis(X, y - X @ beta)
    beta = np.linalg.solve(X[basis], y[basis])
    obj = float(np.sum(check_loss(y - X @ beta, tau)))
    if history is not None:
        history.append(obj / T)
    for pivot in range(max_pivots + 1):
        u = y - X @ beta
        nonbasic = np.ones(T, bool)
        nonbasic[basis] = False
        zero = nonbasic & (np.abs(u) <= zero_tol)
        active = nonbasic & ~zero
        psi = np.where(u < 0, tau - 1.0, tau)
        dirs = np.linalg.inv(X[basis])          # column j moves basic obs j
        Z = X @ dirs                              # T x k: change of fit along each direction
        base = -(psi[active] @ Z[active])         # derivative of active terms for s = +1
        znorm = np.abs(Z).sum(axis=0)
        best = (0.0, None, None)
        for s in (1.0, -1.0):
            v = -s * Z[zero]                      # residual velocity of degenerate points
            degen = np.sum(np.where(v > 0, tau * v, (tau - 1.0) * v), axis=0)
            own = (1.0 - tau) if s > 0 else tau
            rate = s * base + degen + own
            j = int(np.argmin(rate / znorm))
            if rate[j] / znorm[j] < best[0]:
                best = (rate[j] / znorm[j], j, s)
        _, j, s = best
        if j is None or best[0] > -1e-12:
            return beta, pivot, True
        rate = s * base[j] + (1.0 - tau if s > 0 else tau) + np.sum(
            np.where(-s * Z[zero, j] > 0, -tau * s * Z[zero, j], (1.0 - tau) * s * Z[zero, j]))
        if pivot == max_pivots:
            break
        z = s * Z[:, j]
        cand = nonbasic & (np.abs(z) > 1e-14) & ~zero
        t = np.full(T, np.inf)
        t[cand] = u[cand] / z[cand]
        pos = cand & (t > 0)
        if not pos.any():
            # unbounded direction cannot happen for 0 < tau < 1; treat as optimal
            return beta, pivot, True
        order = np.flatnonzero(pos)[np.argsort(t[pos], kind="stable")]
        slope = rate
        enter = order[-1]
        for i in order:
            slope += abs(z[i])
            if slope >= 0:
                enter = i
                break
        beta = beta + t[enter] * s * dirs[:, j]
        basis[j] = int(enter)
        new_obj = float(np.sum(check_loss(y - X @ beta, tau)))
        if history is not None:
            history.append(new_obj / T)
        obj = new_obj
    return beta, max_pivots, False


def fit_quantile_regression(design, response, tau, opts: QrOptions | None = None,
                            beta0=None) -> QrFit:
    """Minimize the mean check loss of ``response - design @ beta``.

    No intercept is added; put a column of ones in ``design`` if one is wanted.

    Raises
    ------
    QrConvergenceError
        If neither the smoothing stages nor the vertex refinement reach an
        optimality certificate within budget. ``err.best`` carries the best
        iterate found.
    """
    opts = opts or QrOptions()
    X, y = _validate(design, response, tau)
    T, k = X.shape
    if beta0 is None:
        beta0 = np.linalg.lstsq(X, y, rcond=None)[0]
    beta = np.asarray(beta0, dtype=float).reshape(1, k)
    scale = _robust_scale(y - X @ beta[0])
    history = []
    used = 0
    smooth_converged = True
    P = (X[:, :, None] * X[:, None, :]).reshape(T, k * k)
    for gamma in _gamma_schedule(opts.gamma_start * scale, opts.gamma_end * scale):
        budget = opts.max_iter - used
        if budget <= 0:
            smooth_converged = False
            break
        beta, it, ok = irls_stage(X, y[None, :], tau, beta, gamma, budget, opts.tol, P, history)
        used += it
        smooth_converged = ok
    smooth = beta[0]
    f_smooth = float(np.mean(check_loss(y - X @ smooth, tau)))
    try:
        exact, pivots, optimal = vertex_descent(X, y, tau, smooth, opts.max_pivots, history)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("design does not have full column rank") from None
    f_exact = float(np.mean(check_loss(y - X @ exact, tau)))
    if f_exact <= f_smooth:
        coef, obj = exact, f_exact
    else:
        coef, obj = smooth, f_smooth
    fit = QrFit(coef, float(tau), obj, used + pivots, optimal, history)
    if not optimal:
        raise QrConvergenceError(
            f"quantile regression did not converge (smoothing converged: {smooth_converged})", fit)
    return fit


def fit_huber_quantile_regression(design, response, tau, gamma, tol=1e-13,
                                  max_iter=5000, beta0=None) -> QrFit:
    """Minimize the mean Huberized check loss at a fixed radius ``gamma``."""
    X, y = _validate(design, response, tau)
    if not gamma > 0:
        raise ValueError("Huber radius must be positive")
    if beta0 is None:
        beta0 = np.linalg.lstsq(X, y, rcond=None)[0]
    history = []
    beta, it, ok = irls_stage(X, y[None, :], tau, np.asarray(beta0, float)[None, :],
                              gamma, max_iter, tol, None, history)
    obj = float(np.mean(huber_check_loss(y - X @ beta[0], tau, gamma)))
    return QrFit(beta[0], float(tau), obj, it, ok, history)


# --------------------------------------------------------------------------
# group LASSO


@dataclass(frozen=True)
class GroupSpec:
    """Partition of coefficient indices into groups.

    Penalty weight of group ``l`` is ``d_l = len(groups[l])``.
    """

    groups: tuple
    penalized: tuple

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        penalized = tuple(bool(p) for p in self.penalized)
        if len(penalized) != len(groups):
            raise ValueError("one penalized flag per group is required")
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(len(flat))) or any(len(g) == 0 for g in groups):
            raise ValueError("groups must partition 0..k-1 into nonempty blocks")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "penalized", penalized)

    @classmethod
    def from_sizes(cls, sizes, penalized) -> "GroupSpec":
        groups, start = [], 0
        for d in sizes:
            groups.append(tuple(range(start, start + d)))
            start += d
        return cls(tuple(groups), tuple(penalized))

    @property
    def k(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def group_sizes(self) -> tuple:
        return tuple(len(g) for g in self.groups)


@dataclass
class GroupLassoFit:
    coefficients: np.ndarray
    active_groups: tuple
    lam: float
    level: float
    gamma: float
    objective: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)

    def predict(self, design):
        return np.asarray(design, dtype=float) @ self.coefficients


def default_gamma(response) -> float:
    """Huber radius tied to the response scale: ``0.25 * IQR / 1.349``, floored."""
    y = np.asarray(response, dtype=float)
    q75, q25 = np.percentile(y, [75, 25])
    return max(0.25 * (q75 - q25) / 1.349, 1e-4)


def _penalty(beta, groups: GroupSpec, lam):
    return lam * sum(len(g) * np.linalg.norm(beta[list(g)])
                     for g, p in zip(groups.groups, groups.penalized) if p)


def group_lasso_objective(design, response, beta, tau, groups, lam, gamma):
    u = np.asarray(response) - np.asarray(design) @ beta
    return float(np.mean(huber_check_loss(u, tau, gamma)) + _penalty(beta, groups, lam))


def huber_gradient(design, response, beta, tau, gamma):
    """Gradient of the mean Huberized check loss with respect to ``beta``."""
    X = np.asarray(design, dtype=float)
    u = np.asarray(response, dtype=float) - X @ beta
    return -(X.T @ huber_check_grad(u, tau, gamma)) / X.shape[0]


@njit(cache=True)
def _gl_loss(X, y, b, tau, gamma, u):
    _residuals(X, y, b, u)
    return _huber_row(u, tau, gamma)


@njit(cache=True)
def _gl_grad(X, u, tau, gamma, out):
    T, k = X.shape
    out[:] = 0.0
    for i in range(T):
        w = tau if u[i] >= 0 else 1.0 - tau
        g = -w * min(max(u[i] / gamma, -1.0), 1.0) / T
        for p in range(k):
            out[p] += g * X[i, p]


@njit(cache=True)
def _gl_prox(v, gid, weight, thresh, out):
    G = weight.size
    nrm = np.zeros(G)
    for p in range(v.size):
        nrm[gid[p]] += v[p] * v[p]
    for p in range(v.size):
        cut = thresh * weight[gid[p]]
        nv = np.sqrt(nrm[gid[p]])
        if cut <= 0.0:
            out[p] = v[p]
        elif nv <= cut:
            out[p] = 0.0
        else:
            out[p] = v[p] * (1.0 - cut / nv)


@njit(cache=True)
def _gl_penalty(b, gid, weight, lam):
    G = weight.size
    nrm = np.zeros(G)
    for p in range(b.size):
        nrm[gid[p]] += b[p] * b[p]
    total = 0.0
    for g in range(G):
        total += weight[g] * np.sqrt(nrm[g])
    return lam * total


@njit(cache=True)
def _gl_kernel(X, y, tau, gamma, lam, beta, gid, weight, step, tol, max_iter):
    T, k = X.shape
    u = np.empty(T)
    grad = np.empty(k)
    cand = np.empty(k)
    history = np.empty(max_iter + 1)
    f_beta = _gl_loss(X, y, beta, tau, gamma, u) + _gl_penalty(beta, gid, weight, lam)
    history[0] = f_beta
    z = beta.copy()
    theta = 1.0
    converged = False
    _gl_loss(X, y, np.zeros(k), tau, gamma, u)
    _gl_grad(X, u, tau, gamma, grad)
    g_scale = max(np.sqrt(np.dot(grad, grad)), 1e-12)
    it = 0
    while it < max_iter:
        it += 1
        fz = _gl_loss(X, y, z, tau, gamma, u)
        _gl_grad(X, u, tau, gamma, grad)
        while True:
            _gl_prox(z - step * grad, gid, weight, step * lam, cand)
            d = cand - z
            fc = _gl_loss(X, y, cand, tau, gamma, u)
            if fc <= fz + np.dot(grad, d) + 0.5 / step * np.dot(d, d) + 1e-15 * abs(fz):
                break
            step *= 0.5
        f_cand = fc + _gl_penalty(cand, gid, weight, lam)
        theta_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        prev = beta
        if f_cand <= f_beta:
            beta = cand.copy()
            f_new = f_cand
        else:
            f_new = f_beta
        z = beta + (theta / theta_next) * (cand - beta) + ((theta - 1.0) / theta_next) * (beta - prev)
        theta = theta_next
        history[it] = f_new
        moved = np.sqrt(np.sum((cand - prev) ** 2)) / max(1.0, np.sqrt(np.sum(prev ** 2)))
        # norm of the gradient mapping: zero exactly at a minimizer
        gmap = np.sqrt(np.dot(d, d)) / step
        if (f_beta - f_new <= tol * max(1.0, abs(f_new)) and moved <= np.sqrt(tol)
                and gmap <= np.sqrt(tol) * g_scale):
            converged = True
            f_beta = f_new
            break
        if f_cand > f_beta:
            # restart momentum when the extrapolated step fails
            z = beta.copy()
            theta = 1.0
        f_beta = f_new
    return beta, f_beta, it, converged, history[:it + 1]


def _gl_newton_polish(X, y, tau, gamma, lam, beta, gid, weight, max_steps=50):
    """Damped Newton steps on the nonzero groups, where the objective is
    piecewise quadratic plus smooth group norms. Only improving steps are
    kept, so the result is never worse than ``beta``."""
    T, k = X.shape
    u = np.empty(T)

    def total(b):
        return _gl_loss(X, y, b, tau, gamma, u) + _gl_penalty(b, gid, weight, lam)

    f = total(beta)
    for _ in range(max_steps):
        nrm = np.sqrt(np.bincount(gid, weights=beta * beta, minlength=weight.size))
        act = (weight[gid] == 0) | (nrm[gid] > 0)
        if not act.any():
            break
        r = y - X @ beta
        w = np.where(r >= 0, tau, 1.0 - tau)
        Xa = X[:, act]
        g = -(Xa.T @ (w * np.clip(r / gamma, -1.0, 1.0))) / T
        H = (Xa.T * (w * (np.abs(r) <= gamma) / gamma)) @ Xa / T
        idx = np.flatnonzero(act)
        for l in np.unique(gid[idx]):
            if weight[l] == 0 or lam == 0:
                continue
            pos = np.flatnonzero(gid[idx] == l)
            b = beta[idx[pos]]
            nb = nrm[l]
            g[pos] += lam * weight[l] * b / nb
            H[np.ix_(pos, pos)] += lam * weight[l] * (np.eye(pos.size) / nb - np.outer(b, b) / nb ** 3)
        step = np.linalg.lstsq(H + 1e-12 * np.trace(H) * np.eye(idx.size), -g, rcond=None)[0]
        t, improved = 1.0, False
        for _ in range(30):
            cand = beta.copy()
            cand[idx] += t * step
            fc = total(cand)
            if fc < f:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        gain = f - fc
        beta, f = cand, fc
        if gain <= 1e-15 * max(1.0, abs(f)):
            break
    return beta, f


def _group_arrays(groups: GroupSpec):
    gid = np.empty(groups.k, dtype=np.int64)
    weight = np.zeros(len(groups.groups))
    for l, (g, p) in enumerate(zip(groups.groups, groups.penalized)):
        gid[list(g)] = l
        weight[l] = len(g) if p else 0.0
    return gid, weight


def fit_group_lasso_qr(design, response, tau, groups: GroupSpec, lam, gamma=None,
                       tol=1e-10, max_iter=20000, beta0=None) -> GroupLassoFit:
    """Group-LASSO quantile regression on the Huberized check loss.

    Minimizes ``mean(huber_check(y - X b)) + lam * sum_l d_l ||b_l||_2`` over
    penalized groups by monotone accelerated proximal gradient with
    backtracking. Unpenalized groups (intercept, lagged target) are never
    shrunk.
    """
    X, y = _validate(design, response, tau)
    if lam < 0:
        raise ValueError("penalty weight must be nonnegative")
    if groups.k != X.shape[1]:
        raise ValueError("group spec does not match the design width")
    gamma = default_gamma(y) if gamma is None else float(gamma)
    T, k = X.shape
    L = max(tau, 1 - tau) * np.linalg.norm(X, 2) ** 2 / (gamma * T)
    gid, weight = _group_arrays(groups)
    beta = np.zeros(k) if beta0 is None else np.array(beta0, dtype=float)
    start = np.empty(k)
    _gl_prox(beta, gid, weight, 0.0, start)
    beta, f_beta, it, converged, history = _gl_kernel(
        np.ascontiguousarray(X), y, float(tau), gamma, float(lam), start, gid, weight,
        1.0 / L, float(tol), int(max_iter))
    beta, f_beta = _gl_newton_polish(np.ascontiguousarray(X), y, float(tau), gamma, float(lam),
                                     beta, gid, weight)
    active = tuple(l for l, g in enumerate(groups.groups)
                   if np.linalg.norm(beta[list(g)]) > 0)
    return GroupLassoFit(beta, active, float(lam), float(tau), gamma, float(f_beta), int(it),
                         bool(converged), list(history))


def lambda_max(design, response, tau, groups: GroupSpec, gamma=None) -> float:
    """Smallest penalty that zeroes every penalized group."""
    X, y = _validate(design, response, tau)
    gamma = default_gamma(y) if gamma is None else gamma
    free = [i for g, p in zip(groups.groups, groups.penalized) if not p for i in g]
    beta = np.zeros(X.shape[1])
    if free:
        beta[free] = fit_huber_quantile_regression(X[:, free], y, tau, gamma).coefficients
    grad = huber_gradient(X, y, beta, tau, gamma)
    vals = [np.linalg.norm(grad[list(g)]) / len(g)
            for g, p in zip(groups.groups, groups.penalized) if p]
    return float(max(vals)) if vals else 0.0


def default_lambda_grid(design, response, tau, groups, gamma=None, size=20):
    lmax = lambda_max(design, response, tau, groups, gamma)
    if lmax <= 0:
        return np.array([0.0])
    return lmax * np.logspace(-4, 1, size)


def select_lambda(design, response, tau, groups: GroupSpec, lambda_grid=None,
                  holdout_fraction=0.2, gamma=None):
    """Choose the penalty by chronological holdout.

    Fits on the earliest ``1 - holdout_fraction`` of rows and scores mean
    check loss on the rest; ties go to the larger penalty.
    """
    if not 0 < holdout_fraction <= 0.5:
        raise ValueError("holdout fraction must lie in (0, 0.5]")
    X, y = _validate(design, response, tau)
    T = len(y)
    n_fit = T - max(1, int(round(holdout_fraction * T)))
    Xf, yf, Xh, yh = X[:n_fit], y[:n_fit], X[n_fit:], y[n_fit:]
    gamma = default_gamma(yf) if gamma is None else gamma
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(Xf, yf, tau, groups, gamma)
    grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    if grid.size == 1:
        return float(grid[0])
    scores = []
    beta = None
    for lam in grid:
        try:
            fit = fit_group_lasso_qr(Xf, yf, tau, groups, lam, gamma, tol=1e-9,
                                     max_iter=5000, beta0=beta)
        except (np.linalg.LinAlgError, ValueError):
            scores.append(np.inf)
            continue
        beta = fit.coefficients
        scores.append(float(np.mean(check_loss(yh - Xh @ beta, tau))))
    scores = np.asarray(scores)
    if not np.isfinite(scores).any():
        raise RuntimeError("every penalty on the grid failed to fit")
    # grid is descending, so argmin returns the largest penalty among ties
    best = np.flatnonzero(scores <= scores.min() + 1e-12)[0]
    return float(grid[best])
