"""Independent reference solvers used only by the tests."""
from itertools import combinations

import numpy as np
from scipy.optimize import linprog

from qff.core import check_loss


def qr_vertex_oracle(X, y, tau):
    """Exact quantile regression by enumerating every basic solution.

    The check-loss problem is a linear program, so some optimum interpolates
    ``k`` observations; trying every ``k``-subset finds it.
    """
    X = np.asarray(X, dtype=float)
    T, k = X.shape
    best = np.inf
    for rows in combinations(range(T), k):
        A = X[list(rows)]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        b = np.linalg.solve(A, y[list(rows)])
        best = min(best, float(np.mean(check_loss(y - X @ b, tau))))
    return best


def qr_linprog(X, y, tau):
    """Quantile regression as ``min tau 1'u + (1 - tau) 1'v`` s.t. ``X b + u - v = y``."""
    T, k = X.shape
    c = np.concatenate([np.zeros(2 * k), tau * np.ones(T), (1 - tau) * np.ones(T)])
    A = np.hstack([X, -X, np.eye(T), -np.eye(T)])
    res = linprog(c, A_eq=A, b_eq=y, bounds=(0, None), method="highs")
    return res.fun / T, res.x[:k] - res.x[k:2 * k]


def qr_grid_oracle(y, tau, lo, hi, step):
    """Intercept-only quantile regression by grid search."""
    grid = np.arange(lo, hi + step / 2, step)
    obj = np.array([np.mean(check_loss(y - b, tau)) for b in grid])
    return grid[np.argmin(obj)], obj.min()
