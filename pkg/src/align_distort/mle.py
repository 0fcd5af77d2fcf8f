"""Bradley-Terry maximum-likelihood rewards."""
from __future__ import annotations

import numpy as np
from scipy.sparse.csgraph import connected_components

from .core import ComparisonCounts, check_win_rates, sigmoid
from .errors import ConvergenceError, SeparableDataError


def _loglik(r, wins, tot_w):
    d = r[:, None] - r[None, :]
    # log sigma(d) = -logaddexp(0, -d)
    return -np.sum(wins * np.logaddexp(0.0, -d)) / tot_w


def _grad(r, wins, trials, tot_w):
    s = sigmoid(r[:, None] - r[None, :])
    return (wins.sum(axis=1) - np.sum(trials * s, axis=1)) / tot_w


def _source_component(wins) -> np.ndarray | None:
    """A set of alternatives that never loses to its complement, if any."""
    graph = (wins > 0).astype(np.int8)
    n_comp, labels = connected_components(graph, directed=True, connection="strong")
    if n_comp == 1:
        return None
    beaten = np.zeros(n_comp, bool)  # component has a member beaten from outside
    xs, ys = np.nonzero(wins > 0)
    cross = labels[xs] != labels[ys]
    beaten[labels[ys[cross]]] = True
    src = int(np.flatnonzero(~beaten)[0])
    return np.flatnonzero(labels == src)


def _newton(wins: np.ndarray, ridge: float, tol: float, max_iter: int = 200) -> np.ndarray:
    """Maximize sum wins[x, y] log sigma(r_x - r_y) / total - ridge |r|^2."""
    m = wins.shape[0]
    wins = np.array(wins, float)
    np.fill_diagonal(wins, 0.0)
    tot_w = wins.sum()
    if tot_w == 0:
        return np.zeros(m)
    trials = wins + wins.T

    def objective(r):
        return _loglik(r, wins, tot_w) - ridge * r @ r

    def gradient(r):
        return _grad(r, wins, trials, tot_w) - 2 * ridge * r

    r = np.zeros(m)
    f = objective(r)
    g = gradient(r)
    ones = np.full((m, m), 1.0 / m)
    for _ in range(max_iter):
        if np.max(np.abs(g)) <= tol:
            break
        s = sigmoid(r[:, None] - r[None, :])
        c = trials * s * (1 - s) / tot_w
        lap = np.diag(c.sum(axis=1)) - c + 2 * ridge * np.eye(m)
        # the Laplacian has the all-ones null vector when ridge = 0; g is
        # orthogonal to it, so adding the projector leaves the step unchanged
        try:
            step = np.linalg.solve(lap + ones, g)
        except np.linalg.LinAlgError:
            step = g
        if g @ step <= 0:
            step = g
        # Armijo on the objective; near the optimum the objective change drops
        # below rounding, so a drop in gradient norm also accepts the step
        gmax = np.max(np.abs(g))
        t = 1.0
        while t >= 1e-12:
            r_new = r + t * step
            f_new = objective(r_new)
            g_new = gradient(r_new)
            if f_new >= f + 1e-4 * t * (g @ step) or np.max(np.abs(g_new)) < gmax:
                break
            t *= 0.5
        else:
            break
        r, f, g = r_new, f_new, g_new
    res = float(np.max(np.abs(g)))
    if res > tol:
        raise ConvergenceError("Bradley-Terry Newton solver stalled", res, r - r.mean())
    return r - r.mean()


def fit_bt_mle(counts: ComparisonCounts, ridge: float = 1e-9, tol: float = 1e-10) -> np.ndarray:
    """Zero-mean BT rewards from pairwise counts (self-pair draws ignored).

    The log-likelihood is divided by the number of informative comparisons so
    ``tol`` bounds the gradient of the per-comparison average.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    wins = counts.wins.astype(float)
    np.fill_diagonal(wins, 0.0)
    if ridge == 0 and wins.sum() > 0:
        src = _source_component(wins)
        if src is not None:
            raise SeparableDataError(src)
    return _newton(wins, ridge, tol)


def fit_bt_mle_population(rates: np.ndarray, pairs, tol: float = 1e-10) -> np.ndarray:
    """Population-limit rewards solving the first-order conditions

        sum_{y != x} nu(x, y) sigma(r_x - r_y) = sum_{y != x} nu(x, y) p(x > y).
    """
    check_win_rates(rates)
    rates = np.asarray(rates, float)
    nu = pairs.pair_matrix(rates.shape[0])
    wins = nu * rates
    src = _source_component(wins)
    if src is not None:
        raise SeparableDataError(src)
    return _newton(wins, 0.0, tol)


def stationarity_residual(r, rates, pairs) -> float:
    nu = pairs.pair_matrix(len(r))
    s = sigmoid(r[:, None] - r[None, :])
    np.fill_diagonal(s, 0.5)
    return float(np.max(np.abs(np.sum(nu * (s - rates), axis=1))))
