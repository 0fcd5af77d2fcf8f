"""Generators for the lower-bound and counterexample constructions.

Each generator returns a ``Construction``: the instance, an optional KL ball,
and an ``analytics`` dict with the quantities the construction predicts.
Tests recompute those quantities from the instance instead of trusting them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (GeneralNu, Instance, ProductOfMu, UtilityMixture, avg_util,
                   expected_win_rates, sigmoid, sigmoid_excess)
from .mle import fit_bt_mle_population
from .policy import KLBall
from .rules import limiting_borda

L_CONST = 0.25
RLHF_MAX_M = 5000
LOG_EPS_FLOOR = -690.0


def nlhf_bound(beta: float) -> float:
    """(beta/2) (1 + e^-beta) / (1 - e^-beta), written as beta / (2 tanh(beta/2))."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    half = 0.5 * beta
    if half < 1e-4:
        return 1.0 + half * half / 3.0  # series of x coth x
    return half / math.tanh(half)


def lin_lower_const(beta: float) -> float:
    """(sigma(beta) - 1/2) / beta."""
    return float(sigmoid_excess(beta)) / beta


@dataclass
class Construction:
    instance: Instance
    analytics: dict = field(default_factory=dict)
    ball: KLBall | None = None


def linearization_bounds(inst: Instance, x: int, y: int) -> tuple[float, float]:
    """Lower and upper bounds on p(x > y) - 1/2 from average utilities alone."""
    au = avg_util(inst)
    b = inst.beta
    ell = lin_lower_const(b)
    lo = b * (ell * au[x] - L_CONST * au[y])
    hi = b * (L_CONST * au[x] - ell * au[y])
    return float(lo), float(hi)


def linearization_matrices(inst: Instance) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``linearization_bounds`` over all ordered pairs."""
    au = avg_util(inst)
    b = inst.beta
    ell = lin_lower_const(b)
    lo = b * (ell * au[:, None] - L_CONST * au[None, :])
    hi = b * (L_CONST * au[:, None] - ell * au[None, :])
    return lo, hi


# ---------------------------------------------------------------- universal floor

def universal_lb_weight(beta: float, eps: float) -> float:
    sa, se = float(sigmoid_excess(beta)), float(sigmoid_excess(beta * eps))
    return se / (sa + se)


def gen_universal_lb(m: int, beta: float, eps: float, xi: float = 1.0) -> Construction:
    """Alternative a (index 0) loved by a small group, b_1..b_{m-1} mildly liked by the rest."""
    if m < 2:
        raise ValueError("m must be at least 2")
    if not (0 < eps <= 0.5):
        raise ValueError("eps must lie in (0, 1/2]")
    if not (1 <= xi < 2):
        raise ValueError("xi must lie in [1, 2)")
    if beta <= 0:
        raise ValueError("beta must be positive")
    w = universal_lb_weight(beta, eps)
    u1 = np.zeros(m)
    u1[0] = 1.0
    u2 = np.full(m, xi * eps)
    u2[0] = 0.0
    inst = Instance(UtilityMixture(np.array([w, 1 - w]), np.vstack([u1, u2])), beta,
                    ProductOfMu(np.full(m, 1.0 / m)))
    sa, se = float(sigmoid_excess(beta)), float(sigmoid_excess(beta * eps))
    floor = 1.0 / (1.0 / m + xi * eps * sa / se)
    analytics = {
        "construction": "universal-lb",
        "m": m, "beta": beta, "eps": eps, "xi": xi,
        "weight_a": w,
        "avg_util_a": w,
        "avg_util_b": xi * eps * (1 - w),
        "win_rate_a_vs_b": w * float(sigmoid(beta)) + (1 - w) * float(sigmoid(-beta * xi * eps)),
        "distortion_floor": floor,
        "nlhf_bound": nlhf_bound(beta),
    }
    return Construction(inst, analytics)


# ---------------------------------------------------------------- Borda

def gamma_star(beta: float) -> float:
    """Utility gap maximizing the Borda lower-bound factor."""
    return (2.0 / beta) * math.atanh(math.sqrt(1.0 - 4.0 * float(sigmoid_excess(beta)) / beta))


def borda_lb_weights(beta: float, gamma: float, eps: float) -> tuple[float, float]:
    pa = universal_lb_weight(beta, eps)
    pb = pa * float(sigmoid_excess(beta * gamma)) / float(sigmoid_excess(beta))
    return pa, pb


def gen_borda_lb(beta: float, gamma: float, eps: float, eps_prime: float,
                 mu_a: float, mu_c: float) -> Construction:
    """Three alternatives a, b, c (indices 0, 1, 2) where Borda picks c over the better a."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if not (0 < eps < 1):
        raise ValueError("eps must lie in (0, 1)")
    if not (0 <= eps_prime < 1 - eps):
        raise ValueError("eps_prime must lie in [0, 1 - eps)")
    if not (0 < gamma < 1):
        raise ValueError("gamma must lie in (0, 1)")
    if not (mu_a > 0 and mu_c > 0 and mu_a + mu_c < 1):
        raise ValueError("need mu_a, mu_c > 0 and mu_a + mu_c < 1")
    pa, pb = borda_lb_weights(beta, gamma, eps)
    if pa + pb >= 1:
        raise ValueError(f"component weights p_A + p_B = {pa + pb:.6g} must be below 1")
    utils = np.array([[1 - gamma, 1.0, 0.0],
                      [1.0, 0.0, eps],
                      [0.0, 0.0, eps + eps_prime]])
    inst = Instance(UtilityMixture(np.array([pa, pb, 1 - pa - pb]), utils), beta,
                    ProductOfMu(np.array([mu_a, 1 - mu_a - mu_c, mu_c])))
    realized = (pa * (1 - gamma) + pb) / (pb * eps + (1 - pa - pb) * (eps + eps_prime))
    factor = 1 - gamma + float(sigmoid_excess(beta * gamma)) / float(sigmoid_excess(beta))
    analytics = {
        "construction": "borda-lb",
        "beta": beta, "gamma": gamma, "eps": eps, "eps_prime": eps_prime,
        "mu": [mu_a, 1 - mu_a - mu_c, mu_c],
        "p_A": pa, "p_B": pb,
        "realized_ratio": realized,
        "limit_ratio": nlhf_bound(beta) * factor,
        "nlhf_bound": nlhf_bound(beta),
        "predicted_borda_winner": 2 if eps_prime > 0 else None,
    }
    return Construction(inst, analytics)


# ---------------------------------------------------------------- RLHF

def rlhf_lb_min_m(beta: float) -> int:
    return math.ceil(4 * math.exp(beta)) + 2


def _rlhf_lb_instance(beta, m, eps, tau):
    delta = 10.0 / (10.0 + math.exp(beta))
    t1 = np.zeros(m)
    t1[1] = 1.0
    t2 = np.ones(m)
    t2[0], t2[1] = 1.0 / beta, 0.0
    inst = Instance(UtilityMixture(np.array([delta, 1 - delta]), np.vstack([t1, t2])), beta,
                    ProductOfMu(np.full(m, 1.0 / m)))
    pi_ref = np.full(m, eps / (m - 2))
    pi_ref[:2] = (1 - eps) / 2
    pi_ref /= pi_ref.sum()
    return inst, KLBall(pi_ref, tau), delta


def gen_rlhf_lb(beta: float, m: int | None = None, eps: float | None = None,
                tau: float = 1.0) -> Construction:
    """RLHF lower bound: a is best on average, b wins the Borda count.

    Alternatives are a, b, c_1..c_{m-2} (indices 0, 1, 2..).  The reference
    policy puts (1 - eps)/2 on each of a and b.  When ``eps`` is omitted it is
    set to half the threshold exp(-2 / min(eta1, eta2)), with the exponent
    clamped at LOG_EPS_FLOOR so the reference policy stays representable.
    """
    if beta < 1:
        raise ValueError("beta must be at least 1 (type II utility of a is 1/beta)")
    m_min = rlhf_lb_min_m(beta)
    if m_min > RLHF_MAX_M:
        raise ValueError(f"beta = {beta} needs m >= {m_min} alternatives, above the "
                         f"supported maximum of {RLHF_MAX_M}; use beta <= "
                         f"{math.log((RLHF_MAX_M - 3) / 4):.2f}")
    m = m_min if m is None else int(m)
    if m < m_min:
        raise ValueError(f"m = {m} too small: the construction needs m >= {m_min}")
    if not tau > 0:
        raise ValueError("tau must be positive")

    inst, _, delta = _rlhf_lb_instance(beta, m, 0.5, tau)
    rates = expected_win_rates(inst)
    r = fit_bt_mle_population(rates, inst.pairs)
    r_shift = r - r[2]  # normalize so r(c) = 0
    au = avg_util(inst)
    bc = limiting_borda(rates, inst.pairs)

    e_b = math.exp(-beta)
    gap_r = r_shift[1] - r_shift[0]
    eta1 = e_b / (1 + abs(r_shift[1]) / abs(gap_r)) if gap_r != 0 else float("nan")
    gap_u = au[0] - au[1]
    eta2 = e_b / (1 + au[0] / gap_u) if gap_u > 0 else float("nan")
    valid = gap_u > 0 and gap_r > 0
    etas = [e for e in (eta1, eta2) if e > 0]
    log_thresh = -2.0 / min(etas) if etas else float("nan")

    if eps is None:
        # half the threshold, clamped where exp() would leave the normal range
        eps = 0.5 * math.exp(max(log_thresh, LOG_EPS_FLOOR)) if etas else 0.5 * math.exp(LOG_EPS_FLOOR)
        eps_rule = "threshold" if etas and log_thresh > LOG_EPS_FLOOR else "clamped"
    else:
        eps_rule = "given"
    if not (0 < eps < 1):
        raise ValueError("eps must lie in (0, 1)")

    inst, ball, _ = _rlhf_lb_instance(beta, m, eps, tau)
    analytics = {
        "construction": "rlhf-lb",
        "beta": beta, "m": m, "m_min": m_min, "eps": eps, "eps_rule": eps_rule, "tau": tau,
        "delta": delta,
        "avg_util_a": float(au[0]), "avg_util_b": float(au[1]), "avg_util_c": float(au[2]),
        "reward_a": float(r_shift[0]), "reward_b": float(r_shift[1]),
        "borda_gap_b_minus_a": float(bc[1] - bc[0]),
        "borda_gap_floor": 1.0 / m,
        "eta1": eta1, "eta2": eta2,
        "log_eps_threshold": log_thresh,
        "eps_below_threshold": bool(math.isfinite(log_thresh) and math.log(eps) < log_thresh),
        "c_mass_cap": 2.0 / math.log(1.0 / eps),
        "avg_util_a_exceeds_b": bool(gap_u > 0),
        "construction_valid": bool(valid),
    }
    return Construction(inst, analytics, ball)


# ---------------------------------------------------------------- unbounded sequence

def unbounded_sequence_utils(beta: float, m: int) -> np.ndarray:
    """3 x m utilities of the recursive sequence a_1..a_m."""
    u = np.zeros((3, m))
    u[:, 0] = 1.0 / 3.0
    for t in range(1, m):
        prev = u[:, t - 1]
        top = int(np.argmax(prev))  # lowest index among ties
        dlt = beta * prev[top]
        # log((e^{D/2} + 1)^3 / (2 (e^D + 3))) rewritten without overflow
        dlt_p = dlt / 2 - math.log1p(math.tanh(dlt / 4) ** 3)
        u[:, t] = prev + dlt_p / beta
        u[top, t] = 0.0
    return u


def gen_unbounded_seq(beta: float, m: int, eps: float) -> Construction:
    """Sequence a_1..a_m whose BT rewards increase while average utility decays."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if m < 2:
        raise ValueError("m must be at least 2")
    if not (0 < eps < 1):
        raise ValueError("eps must lie in (0, 1)")
    u = np.clip(unbounded_sequence_utils(beta, m), 0.0, 1.0)
    n_pairs = m * (m - 1) // 2
    pairs, probs = [], []
    n_other = n_pairs - (m - 1)
    for x in range(m):
        for y in range(x + 1, m):
            pairs.append((x, y))
            if y == x + 1:
                probs.append((1 - eps) / (m - 1) if n_other else 1.0 / (m - 1))
            else:
                probs.append(eps / n_other)
    inst = Instance(UtilityMixture(np.full(3, 1.0 / 3.0), u), beta, GeneralNu(pairs, probs))
    au = u.mean(axis=0)
    dec_bound = [float((2 / (3 * beta)) * math.log1p(math.tanh(beta / 4 * au[t - 1]) ** 3))
                 for t in range(1, m)]
    steps = []
    for t in range(1, m):
        dlt = beta * u[:, t - 1].max()
        dlt_p = dlt / 2 - math.log1p(math.tanh(dlt / 4) ** 3)
        steps.append({"delta": dlt, "delta_prime": dlt_p,
                      "win_rate": (float(sigmoid(-dlt)) + 2 * float(sigmoid(dlt_p))) / 3})
    analytics = {
        "construction": "unbounded-seq",
        "beta": beta, "m": m, "eps": eps,
        "avg_util": au.tolist(),
        "decrement_bound": dec_bound,
        "steps": steps,
        "rlhf_ratio_if_last": float(au[0] / au[-1]),
    }
    return Construction(inst, analytics)


# ---------------------------------------------------------------- random

def random_mixture(rng: np.random.Generator, m: int, k: int) -> UtilityMixture:
    """Random population mixing dense, sparse and near-binary utility profiles."""
    weights = rng.dirichlet(np.full(k, rng.choice([0.3, 1.0, 3.0])))
    weights = np.maximum(weights, 1e-6)
    weights /= weights.sum()
    rows = []
    for _ in range(k):
        style = rng.integers(3)
        if style == 0:
            row = rng.random(m)
        elif style == 1:
            row = rng.random(m) * (rng.random(m) < 0.4)
        else:
            row = np.clip(rng.integers(0, 2, m) + rng.normal(0, 0.05, m), 0, 1)
        rows.append(row)
    return UtilityMixture(weights, np.array(rows))


def random_instance(rng: np.random.Generator, m_range=(2, 10), k_range=(1, 5),
                    beta: float | None = None, beta_range=(0.1, 20.0),
                    pairs: str = "mu") -> Instance:
    """Random instance; beta is log-uniform over ``beta_range`` unless given."""
    m = int(rng.integers(m_range[0], m_range[1] + 1))
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    if beta is None:
        beta = float(np.exp(rng.uniform(np.log(beta_range[0]), np.log(beta_range[1]))))
    mixture = random_mixture(rng, m, k)
    if pairs == "mu":
        mu = rng.dirichlet(np.full(m, 2.0))
        mu = np.maximum(mu, 1e-3)
        pd = ProductOfMu(mu / mu.sum())
    else:
        iu = np.triu_indices(m, 1)
        probs = rng.dirichlet(np.full(len(iu[0]), 2.0))
        probs = np.maximum(probs, 1e-4)
        pd = GeneralNu(np.column_stack(iu), probs / probs.sum())
    return Instance(mixture, beta, pd)
