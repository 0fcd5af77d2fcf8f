"""Borda count and Maximal Lotteries."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.optimize import linprog

from .core import ComparisonCounts, check_win_rates
from .errors import ConvergenceError


def unobserved(counts: ComparisonCounts) -> np.ndarray:
    """Indices of alternatives that appear in no comparison."""
    w = counts.wins
    return np.flatnonzero(w.sum(axis=0) + w.sum(axis=1) == 0)


def borda_scores(counts: ComparisonCounts) -> np.ndarray:
    """Normalized Borda score: share of comparisons involving x that x wins.

    A self-pair counts as a win and a loss, so it adds one to the numerator
    and two to the denominator.  Unobserved alternatives score 1/2.
    """
    w = counts.wins.astype(float)
    won = w.sum(axis=1)
    involved = won + w.sum(axis=0)
    missing = involved == 0
    if missing.any():
        warnings.warn(f"alternatives {np.flatnonzero(missing).tolist()} never compared; "
                      "their Borda score is set to 1/2", stacklevel=2)
    return np.where(missing, 0.5, won / np.where(missing, 1.0, involved))


def limiting_borda(rates: np.ndarray, mu) -> np.ndarray:
    """BC*(x) = mu(x)/2 + sum_{y != x} mu(y) p(x > y)."""
    from .core import GeneralNu, ProductOfMu
    if isinstance(mu, GeneralNu):
        raise ValueError("Borda is undefined for a general pair distribution")
    if isinstance(mu, ProductOfMu):
        mu = mu.mu
    mu = np.asarray(mu, float)
    rates = np.asarray(rates, float)
    if rates.shape != (mu.size, mu.size):
        raise ValueError("rates and mu sizes differ")
    # the diagonal of rates is 1/2, so this is the formula above written as
    # 1/2 + sum_y mu(y) (p(x > y) - 1/2), which keeps small gaps accurate
    excess = rates - 0.5
    np.fill_diagonal(excess, 0.0)
    return 0.5 + excess @ mu


def borda_rule(scores, tie_tol: float = 1e-9) -> np.ndarray:
    """Uniform over alternatives scoring within ``tie_tol`` (absolute) of the best."""
    s = np.asarray(scores, float)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    win = s >= s.max() - tie_tol
    return win / win.sum()


def margin_matrix(rates: np.ndarray) -> np.ndarray:
    check_win_rates(rates)
    M = 2.0 * np.asarray(rates, float) - 1.0
    np.fill_diagonal(M, 0.0)
    return M


def check_margins(M: np.ndarray, tol: float = 1e-12) -> None:
    M = np.asarray(M, float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("margin matrix must be square")
    if np.max(np.abs(M + M.T)) > tol:
        raise ValueError("margin matrix is not antisymmetric")
    if np.abs(M).max() > 1 + tol:
        raise ValueError("margins must lie in [-1, 1]")


def simplex_exploitability(pi, M) -> float:
    """-min_y sum_x pi(x) M[x, y]; at most tol certifies a maximal lottery."""
    return float(-np.min(np.asarray(pi) @ np.asarray(M)))


def _equalize(M: np.ndarray, support: np.ndarray) -> np.ndarray | None:
    """Solve M[S, S]^T pi_S = 0, sum pi_S = 1; None if not a valid policy."""
    S = support
    A = np.vstack([M[np.ix_(S, S)].T, np.ones(len(S))])
    b = np.zeros(len(S) + 1)
    b[-1] = 1.0
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.any(x < 0):
        return None
    pi = np.zeros(M.shape[0])
    pi[S] = x / x.sum()
    return pi


def refine_support(M: np.ndarray, pi: np.ndarray, rel: float = 1e-7) -> np.ndarray:
    """Polish an approximate equilibrium by equalizing payoffs on its support."""
    support = np.flatnonzero(pi > rel * pi.max())
    cand = _equalize(M, support)
    if cand is not None and simplex_exploitability(cand, M) <= simplex_exploitability(pi, M):
        return cand
    return pi


def _lp_lottery(M: np.ndarray) -> np.ndarray:
    m = M.shape[0]
    # variables (pi, v): maximize v s.t. pi^T M[:, y] >= v
    c = np.zeros(m + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-M.T, np.ones((m, 1))])
    A_eq = np.hstack([np.ones((1, m)), np.zeros((1, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(m), A_eq=A_eq, b_eq=[1.0],
                  bounds=[(0, None)] * m + [(None, None)], method="highs")
    if res.status != 0:
        raise ConvergenceError(f"linear program failed: {res.message}")
    pi = np.clip(res.x[:m], 0, None)
    return pi / pi.sum()


def _mwu_lottery(M: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    m = M.shape[0]
    scale = max(np.abs(M).max(), 1e-300)
    log_w = np.zeros(m)
    pi = np.full(m, 1.0 / m)
    avg = np.zeros(m)
    for t in range(1, max_iter + 1):
        avg += (pi - avg) / t
        log_w += np.sqrt(np.log(max(m, 2)) / t) * (M @ pi) / scale
        log_w -= log_w.max()
        pi = np.exp(log_w)
        pi /= pi.sum()
        if t % 1000 == 0 and simplex_exploitability(avg, M) <= tol:
            return avg
    gap = simplex_exploitability(avg, M)
    if gap <= tol:
        return avg
    raise ConvergenceError(f"multiplicative weights hit the {max_iter} iteration cap",
                           gap, avg)


def maximal_lotteries(M, tol: float = 1e-9, method: str = "lp",
                      max_iter: int = 10**6) -> np.ndarray:
    """A maximal lottery: equilibrium of the symmetric zero-sum game on M.

    ``method="lp"`` solves the game as a linear program and then equalizes
    payoffs on the support; ``method="mwu"`` runs averaged multiplicative
    weights self-play.
    """
    M = np.asarray(M, float)
    check_margins(M)
    m = M.shape[0]
    if not np.any(M):
        return np.full(m, 1.0 / m)
    if method == "lp":
        pi = refine_support(M, _lp_lottery(M))
    elif method == "mwu":
        pi = _mwu_lottery(M, tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    gap = simplex_exploitability(pi, M)
    if gap > tol:
        raise ConvergenceError("maximal lottery solver missed tolerance", gap, pi)
    return pi


def is_unique_equilibrium(M, pi, margin: float = 1e-7) -> bool:
    """Sufficient test that ``pi`` is the only maximal lottery of M.

    Holds when payoffs off the support are strictly positive and the payoff
    equalization system on the support has full column rank.
    """
    M = np.asarray(M, float)
    pi = np.asarray(pi, float)
    support = pi > margin
    payoff = pi @ M
    if np.any(~support) and payoff[~support].min() <= margin:
        return False
    S = np.flatnonzero(support)
    A = np.vstack([M[np.ix_(S, S)].T, np.ones(len(S))])
    return bool(np.linalg.svd(A, compute_uv=False).min() > margin)
