"""KL-ball policy optimization: RLHF, DPO, NLHF and the utility benchmark."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr, softmax

from .core import ComparisonCounts, Instance, avg_util
from .errors import BracketError, ConvergenceError
from .mle import fit_bt_mle, fit_bt_mle_population
from .rules import check_margins

log = logging.getLogger(__name__)

LAMBDA_MIN, LAMBDA_MAX = 1e-12, 1e12


@dataclass(frozen=True)
class KLBall:
    """Policies within KL divergence ``tau`` of a strictly positive ``pi_ref``."""

    pi_ref: np.ndarray
    tau: float

    def __post_init__(self):
        p = np.array(self.pi_ref, float)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("pi_ref must be a vector of length >= 2")
        if not np.all(p > 0):
            raise ValueError("pi_ref must be strictly positive; drop zero-mass alternatives first")
        if abs(p.sum() - 1) > 1e-12:
            raise ValueError(f"pi_ref sums to {p.sum()!r}, not 1")
        tau = float(self.tau)
        if not (tau >= 0 and np.isfinite(tau)):
            raise ValueError("tau must be a finite nonnegative number")
        p.setflags(write=False)
        object.__setattr__(self, "pi_ref", p)
        object.__setattr__(self, "tau", tau)

    @property
    def m(self) -> int:
        return self.pi_ref.size

    @classmethod
    def simplex(cls, m: int) -> "KLBall":
        """Uniform reference with tau = log m: every vertex is feasible."""
        return cls(np.full(m, 1.0 / m), np.log(m))


def kl_div(pi, pi_ref) -> float:
    return float(np.sum(rel_entr(np.asarray(pi, float), np.asarray(pi_ref, float))))


def regularized_linear_max(r, pi_ref, lam: float) -> np.ndarray:
    """argmax <r, pi> - lam KL(pi || pi_ref), i.e. pi ∝ pi_ref exp(r / lam)."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return softmax(np.log(np.asarray(pi_ref, float)) + np.asarray(r, float) / lam)


def _gibbs_limit(r, pi_ref, rel: float = 1e-12):
    spread = r.max() - r.min()
    top = r >= r.max() - rel * spread
    pi = np.where(top, pi_ref, 0.0)
    mass = pi.sum()
    return pi / mass, -np.log(mass)


def solve_linear_ball(r, ball: KLBall, tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Maximizer of <r, pi> over the ball and its KL multiplier.

    The multiplier is inf when the ball is a point and 0 when the constraint
    is slack.  The returned policy always satisfies KL <= tau.
    """
    r = np.asarray(r, float)
    pi_ref = ball.pi_ref
    if r.shape != pi_ref.shape:
        raise ValueError("reward and reference lengths differ")
    spread = r.max() - r.min()
    if ball.tau == 0 or spread == 0:
        return pi_ref.copy(), np.inf
    limit, kl_limit = _gibbs_limit(r, pi_ref)
    if ball.tau >= kl_limit - 1e-12:
        return limit, 0.0

    def kl_at(s):
        pi = regularized_linear_max(r, pi_ref, spread * np.exp(s))
        return kl_div(pi, pi_ref), pi

    lo, hi = np.log(LAMBDA_MIN), np.log(LAMBDA_MAX)
    kl_lo, _ = kl_at(lo)
    kl_hi, pi_hi = kl_at(hi)
    while kl_hi > ball.tau and hi < 690.0:
        hi += 10.0
        kl_hi, pi_hi = kl_at(hi)
    if kl_hi > ball.tau:
        # radius below the rounding floor of KL: the ball is numerically a point
        return pi_ref.copy(), np.inf
    if not (kl_hi <= ball.tau <= kl_lo):
        raise BracketError("KL ball bisection bracket failed", kl_lo, kl_hi)
    for _ in range(300):
        if ball.tau - kl_hi <= tol or hi - lo < 1e-15:
            break
        mid = 0.5 * (lo + hi)
        kl_mid, pi_mid = kl_at(mid)
        if kl_mid > ball.tau:
            lo = mid
        else:
            hi, kl_hi, pi_hi = mid, kl_mid, pi_mid
    return pi_hi, spread * np.exp(hi)


def linear_max_over_ball(r, ball: KLBall, tol: float = 1e-10) -> np.ndarray:
    return solve_linear_ball(r, ball, tol)[0]


def rlhf_policy(counts_or_rates, ball: KLBall, tol: float = 1e-10, pairs=None,
                ridge: float = 1e-9) -> np.ndarray:
    """Fit BT rewards (from counts, or from win rates plus ``pairs``) then maximize over the ball."""
    if isinstance(counts_or_rates, ComparisonCounts):
        r = fit_bt_mle(counts_or_rates, ridge=ridge)
    else:
        if pairs is None:
            raise ValueError("population RLHF needs the pair distribution")
        r = fit_bt_mle_population(counts_or_rates, pairs)
    return linear_max_over_ball(r, ball, tol)


def dpo_policy(counts: ComparisonCounts, pi_ref, lam: float, tol: float = 1e-10,
               ridge: float = 1e-9) -> np.ndarray:
    """DPO optimum through its closed form: the Gibbs policy of the MLE rewards."""
    r = fit_bt_mle(counts, ridge=ridge, tol=tol)
    return regularized_linear_max(r, pi_ref, lam)


def dpo_loss(logits, counts: ComparisonCounts, pi_ref, lam: float) -> float:
    """Average DPO loss of the policy softmax(logits) on the counts."""
    logp = logits - np.logaddexp.reduce(logits)
    h = lam * (logp - np.log(pi_ref))
    w = counts.wins.astype(float)
    np.fill_diagonal(w, 0.0)
    return float(np.sum(w * np.logaddexp(0.0, -(h[:, None] - h[None, :]))) / w.sum())


def optimal_policy(inst: Instance, ball: KLBall, tol: float = 1e-10) -> np.ndarray:
    return linear_max_over_ball(avg_util(inst), ball, tol)


def exploitability(pi, M, ball: KLBall, tol: float = 1e-12) -> float:
    """Best-response gain against ``pi`` inside the ball: max_{q in ball} <M pi, q>."""
    payoff = np.asarray(M, float) @ np.asarray(pi, float)
    q = linear_max_over_ball(payoff, ball, tol)
    return float(payoff @ q)


# ---------------------------------------------------------------- NLHF

def regularized_nash(M, pi_ref, lam: float, theta0=None, tol: float = 1e-13,
                     max_iter: int = 100):
    """Symmetric equilibrium of the KL-regularized game at strength ``lam``.

    Solves theta = log pi_ref + M softmax(theta) / lam by Newton's method in
    logit space.  The Jacobian I - M D / lam (D the softmax Jacobian) is
    nonsingular because M D is similar to an antisymmetric matrix.
    Returns (pi, theta) or raises ConvergenceError.
    """
    M = np.asarray(M, float)
    log_ref = np.log(np.asarray(pi_ref, float))
    theta = log_ref.copy() if theta0 is None else np.array(theta0, float)
    eye = np.eye(len(theta))

    def resid(th):
        pi = softmax(th)
        return th - log_ref - (M @ pi) / lam, pi

    F, pi = resid(theta)
    nrm = np.max(np.abs(F))
    scale = 1.0 + np.max(np.abs(log_ref)) + np.abs(M).max() / lam
    for _ in range(max_iter):
        if nrm <= tol * scale:
            return pi, theta
        D = np.diag(pi) - np.outer(pi, pi)
        step = np.linalg.solve(eye - (M @ D) / lam, -F)
        t = 1.0
        while t > 1e-10:
            F_new, pi_new = resid(theta + t * step)
            nrm_new = np.max(np.abs(F_new))
            if nrm_new < (1 - 1e-4 * t) * nrm:
                break
            t *= 0.5
        else:
            break
        theta, F, pi, nrm = theta + t * step, F_new, pi_new, nrm_new
    if nrm <= tol * scale * 1e3:
        return pi, theta
    raise ConvergenceError(f"regularized equilibrium Newton failed at lambda={lam:.3e}", nrm, pi)


def _continue_to(M, pi_ref, lam_from, theta, lam_to):
    """Track the regularized equilibrium from lam_from to lam_to by continuation."""
    ratio = lam_to / lam_from
    steps = 1
    while True:
        try:
            lam, th = lam_from, theta
            for k in range(1, steps + 1):
                lam = lam_from * ratio ** (k / steps)
                pi, th = regularized_nash(M, pi_ref, lam, th)
            return pi, th
        except ConvergenceError:
            if steps >= 1024:
                raise
            steps *= 4


def _polish_unconstrained(M, pi):
    from .rules import refine_support
    return refine_support(M, pi, rel=1e-6)


def nlhf_policy(M, ball: KLBall, tol: float = 1e-9, kl_tol: float = 1e-10) -> np.ndarray:
    """KL-constrained symmetric equilibrium of the margin game.

    Walks the regularized-equilibrium path in lambda (each point is a
    constrained equilibrium for the ball through its own KL) and bisects for
    the point whose KL equals tau.  When the path stays inside the ball all
    the way down, the unregularized limit is feasible and is returned after
    equalizing payoffs on its support.
    """
    M = np.asarray(M, float)
    check_margins(M)
    pi_ref = ball.pi_ref
    tau = ball.tau
    if tau == 0 or not np.any(M):
        return pi_ref.copy()
    scale = np.abs(M).max()

    def certified(pi):
        return kl_div(pi, pi_ref) <= tau + tol and exploitability(pi, M, ball) <= tol

    lam_big = scale
    pi_big, th_big = _continue_to(M, pi_ref, 1e3 * scale, np.log(pi_ref), lam_big)
    while kl_div(pi_big, pi_ref) > tau:
        if lam_big > LAMBDA_MAX * scale:
            raise ConvergenceError("tau below the KL of every tracked equilibrium", np.nan, pi_ref)
        lam_big *= 4
        pi_big, th_big = _continue_to(M, pi_ref, lam_big / 4, th_big, lam_big)

    # walk down until KL crosses tau
    lam_small, pi_small, th_small = None, None, None
    floor = 1e-7 * scale
    lam, th = lam_big, th_big
    while lam > floor:
        lam_next = lam * 0.5
        pi_next, th_next = _continue_to(M, pi_ref, lam, th, lam_next)
        if kl_div(pi_next, pi_ref) >= tau:
            lam_small, pi_small, th_small = lam_next, pi_next, th_next
            break
        lam, th = lam_next, th_next
        lam_big, pi_big, th_big = lam, pi_next, th_next

    if lam_small is None:
        cand = _polish_unconstrained(M, pi_big)
        if certified(cand):
            return cand
        # crossing hides below the floor; keep walking towards LAMBDA_MIN
        lam, th = lam_big, th_big
        while lam > LAMBDA_MIN * scale:
            lam_next = lam * 0.5
            pi_next, th_next = _continue_to(M, pi_ref, lam, th, lam_next)
            if kl_div(pi_next, pi_ref) >= tau:
                lam_small, pi_small, th_small = lam_next, pi_next, th_next
                break
            lam, th = lam_next, th_next
            lam_big, pi_big, th_big = lam, pi_next, th_next
        if lam_small is None:
            return _scan_fallback(M, ball, tol, pi_big)

    # bisection in log lambda on the crossing bracket
    kl_big = kl_div(pi_big, pi_ref)
    for _ in range(200):
        # lam * (tau - KL) is the exploitability left by stopping short of tau
        if tau - kl_big <= kl_tol and lam_big * (tau - kl_big) <= 1e-3 * tol:
            break
        lam_mid = np.sqrt(lam_big * lam_small)
        if lam_mid in (lam_big, lam_small):
            break
        pi_mid, th_mid = _continue_to(M, pi_ref, lam_big, th_big, lam_mid)
        kl_mid = kl_div(pi_mid, pi_ref)
        if kl_mid > tau:
            lam_small, pi_small, th_small = lam_mid, pi_mid, th_mid
        else:
            lam_big, pi_big, th_big, kl_big = lam_mid, pi_mid, th_mid, kl_mid
    if certified(pi_big):
        return pi_big
    log.warning("NLHF bisection certificate failed; falling back to a lambda scan")
    return _scan_fallback(M, ball, tol, pi_big)


def _scan_fallback(M, ball: KLBall, tol: float, best) -> np.ndarray:
    """Dense lambda scan keeping the feasible point with the best certificate."""
    scale = np.abs(M).max()
    pi_ref = ball.pi_ref
    best_gap = exploitability(best, M, ball) if kl_div(best, pi_ref) <= ball.tau + tol else np.inf
    lams = scale * np.logspace(3, -10, 1000)
    th = np.log(pi_ref)
    prev = lams[0]
    for lam in lams:
        try:
            pi, th = _continue_to(M, pi_ref, prev, th, lam)
        except ConvergenceError:
            break
        prev = lam
        if kl_div(pi, pi_ref) <= ball.tau + tol:
            gap = exploitability(pi, M, ball)
            if gap < best_gap:
                best, best_gap = pi, gap
    if best_gap <= tol:
        return best
    raise ConvergenceError("NLHF lambda scan found no certified equilibrium", best_gap, best)
