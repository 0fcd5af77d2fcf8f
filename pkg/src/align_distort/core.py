"""Instances, exact win rates, average utilities and comparison sampling."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np
from scipy.special import expit

from . import _hashrng

SUM_TOL = 1e-12

# sampler streams
_S_COMPONENT, _S_PAIR_X, _S_PAIR_Y, _S_LABEL = 1, 2, 3, 4
_CHUNK_DRAWS = 1 << 20


def sigmoid(t):
    """Logistic function, overflow-free for any finite input."""
    return expit(t)


def sigmoid_excess(t):
    """sigma(t) - 1/2 computed without cancellation."""
    return 0.5 * np.tanh(0.5 * np.asarray(t, dtype=float))


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def max_threads() -> int:
    env = os.environ.get("ALIGN_DISTORT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"ALIGN_DISTORT_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


@dataclass(frozen=True)
class UtilityMixture:
    """Finite population: row k of ``utils`` is drawn with probability ``weights[k]``."""

    weights: np.ndarray
    utils: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights)
        u = _frozen(self.utils)
        if u.ndim != 2 or w.ndim != 1 or u.shape[0] != w.shape[0]:
            raise ValueError("utils must be K x m and weights length K")
        if u.shape[1] < 2:
            raise ValueError("need at least m = 2 alternatives")
        if w.size == 0 or not np.all(w > 0):
            raise ValueError("component weights must be strictly positive")
        if abs(w.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"component weights sum to {w.sum()!r}, not 1")
        if not np.all(np.isfinite(u)) or u.min() < 0.0 or u.max() > 1.0:
            raise ValueError("utilities must lie in [0, 1]")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "utils", u)

    @property
    def m(self) -> int:
        return self.utils.shape[1]

    @classmethod
    def from_components(cls, components) -> "UtilityMixture":
        """Build from an iterable of (weight, utility vector) pairs."""
        comps = list(components)
        return cls(np.array([c[0] for c in comps], float),
                   np.array([c[1] for c in comps], float))


@dataclass(frozen=True)
class ProductOfMu:
    """Both alternatives of a pair drawn independently from ``mu``."""

    mu: np.ndarray

    def __post_init__(self):
        mu = _frozen(self.mu)
        if mu.ndim != 1 or mu.size < 2:
            raise ValueError("mu must be a vector of length >= 2")
        if not np.all(mu > 0):
            raise ValueError("every mu(x) must be strictly positive")
        if abs(mu.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"mu sums to {mu.sum()!r}, not 1")
        object.__setattr__(self, "mu", mu)

    kind = "mu"

    def pair_matrix(self, m: int) -> np.ndarray:
        """Symmetric matrix of unordered-pair probabilities, zero diagonal."""
        if self.mu.size != m:
            raise ValueError("mu length does not match m")
        nu = 2.0 * np.outer(self.mu, self.mu)
        np.fill_diagonal(nu, 0.0)
        return nu


@dataclass(frozen=True)
class GeneralNu:
    """Explicit distribution over unordered pairs of distinct alternatives."""

    pairs: np.ndarray  # (P, 2) ints with x < y
    probs: np.ndarray

    def __post_init__(self):
        pairs = np.array(self.pairs, dtype=np.int64).reshape(-1, 2)
        probs = np.array(self.probs, dtype=float)
        if pairs.shape[0] != probs.shape[0]:
            raise ValueError("pairs and probs length mismatch")
        if np.any(pairs[:, 0] == pairs[:, 1]):
            raise ValueError("GeneralNu is defined over distinct pairs only")
        if pairs.size and pairs.min() < 0:
            raise ValueError("alternative indices must be nonnegative")
        pairs = np.sort(pairs, axis=1)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs, probs = pairs[order], probs[order]
        if len(pairs) > 1 and np.any(np.all(pairs[1:] == pairs[:-1], axis=1)):
            raise ValueError("duplicate pair in GeneralNu")
        if not np.all(probs > 0):
            raise ValueError("pair probabilities must be strictly positive")
        if abs(probs.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"pair probabilities sum to {probs.sum()!r}, not 1")
        pairs.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "probs", probs)

    kind = "nu"

    def pair_matrix(self, m: int) -> np.ndarray:
        if self.pairs.max() >= m:
            raise ValueError("pair index out of range")
        if len(self.pairs) != m * (m - 1) // 2:
            raise ValueError("every pair of distinct alternatives needs positive probability")
        nu = np.zeros((m, m))
        nu[self.pairs[:, 0], self.pairs[:, 1]] = self.probs
        nu[self.pairs[:, 1], self.pairs[:, 0]] = self.probs
        return nu


PairDistribution = Union[ProductOfMu, GeneralNu]


@dataclass(frozen=True)
class Instance:
    mixture: UtilityMixture
    beta: float
    pairs: PairDistribution

    def __post_init__(self):
        beta = float(self.beta)
        if not (np.isfinite(beta) and beta > 0):
            raise ValueError("beta must be a positive finite number")
        object.__setattr__(self, "beta", beta)
        self.pairs.pair_matrix(self.m)  # validates sizes and coverage

    @property
    def m(self) -> int:
        return self.mixture.m


@dataclass(frozen=True)
class ComparisonCounts:
    """wins[x, y] = #(x beats y); wins[x, x] counts self-pair draws of x."""

    wins: np.ndarray

    def __post_init__(self):
        w = np.array(self.wins)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 2:
            raise ValueError("wins must be a square matrix with m >= 2")
        if not np.all(np.asarray(w) == np.round(w)):
            raise ValueError("counts must be integers")
        w = w.astype(np.int64)
        if w.min() < 0:
            raise ValueError("counts must be nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "wins", w)

    @property
    def m(self) -> int:
        return self.wins.shape[0]

    @property
    def total(self) -> int:
        return int(self.wins.sum())


def check_win_rates(p: np.ndarray, tol: float = 1e-12) -> None:
    p = np.asarray(p, float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("win rates must be a square matrix")
    if p.min() < 0 or p.max() > 1:
        raise ValueError("win rates must lie in [0, 1]")
    if np.max(np.abs(p + p.T - 1.0)) > tol:
        raise ValueError("win rates violate p[x, y] + p[y, x] = 1")


def _half_margins(inst: Instance) -> np.ndarray:
    # sum_k w_k (sigma(beta (u_k(x) - u_k(y))) - 1/2), exactly antisymmetric
    u = inst.mixture.utils
    w = inst.mixture.weights
    m = inst.m
    out = np.zeros((m, m))
    block = max(1, (1 << 22) // (m * m))
    for s in range(0, len(w), block):
        diff = u[s:s + block, :, None] - u[s:s + block, None, :]
        out += np.tensordot(w[s:s + block], sigmoid_excess(inst.beta * diff), axes=1)
    return out


def expected_win_rates(inst: Instance) -> np.ndarray:
    """Population win-rate matrix p[x, y] = P(random user prefers x to y)."""
    return 0.5 + _half_margins(inst)


def expected_margins(inst: Instance) -> np.ndarray:
    """2 p - 1, computed directly so small margins keep full relative precision."""
    return 2.0 * _half_margins(inst)


def avg_util(inst: Instance) -> np.ndarray:
    return inst.mixture.weights @ inst.mixture.utils


def avg_util_policy(inst: Instance, pi) -> float:
    pi = np.asarray(pi, float)
    if pi.shape != (inst.m,) or pi.min() < 0 or abs(pi.sum() - 1) > 1e-9:
        raise ValueError("policy must be a probability vector of length m")
    return float(avg_util(inst) @ pi)


# ---------------------------------------------------------------- sampling

def _check_sizes(n: int, d: int) -> None:
    if n < 0 or d < 0:
        raise ValueError("n and d must be nonnegative")
    if n and d and n > np.iinfo(np.int64).max // d:
        raise OverflowError(f"n*d = {n}*{d} overflows the int64 count type")


def _draw_chunk(inst: Instance, seed: int, lo: int, hi: int, d: int):
    """Winners and losers for users lo..hi-1; pure function of its arguments."""
    m = inst.m
    users = np.arange(lo, hi, dtype=np.uint64)
    cw = np.cumsum(inst.mixture.weights)
    comp = np.searchsorted(cw, _hashrng.uniforms(_hashrng.stream_key(seed, _S_COMPONENT),
                                                 users, 0), side="right")
    comp = np.minimum(comp, len(cw) - 1)
    slots = np.arange(d, dtype=np.uint64)[None, :]
    u_col = users[:, None]
    pd = inst.pairs
    if isinstance(pd, ProductOfMu):
        cm = np.cumsum(pd.mu)
        x = np.searchsorted(cm, _hashrng.uniforms(_hashrng.stream_key(seed, _S_PAIR_X),
                                                  u_col, slots), side="right")
        y = np.searchsorted(cm, _hashrng.uniforms(_hashrng.stream_key(seed, _S_PAIR_Y),
                                                  u_col, slots), side="right")
        x = np.minimum(x, m - 1)
        y = np.minimum(y, m - 1)
    else:
        cn = np.cumsum(pd.probs)
        idx = np.searchsorted(cn, _hashrng.uniforms(_hashrng.stream_key(seed, _S_PAIR_X),
                                                    u_col, slots), side="right")
        idx = np.minimum(idx, len(cn) - 1)
        x, y = pd.pairs[idx, 0], pd.pairs[idx, 1]
    a = np.minimum(x, y)
    b = np.maximum(x, y)
    # one uniform per (user, unordered pair): repeats reuse the same label
    lab = _hashrng.uniforms(_hashrng.stream_key(seed, _S_LABEL), u_col,
                            (a * m + b).astype(np.uint64))
    uk = inst.mixture.utils[comp]
    rows = np.arange(len(users))[:, None]
    p_a = sigmoid(inst.beta * (uk[rows, a] - uk[rows, b]))
    a_wins = lab < p_a
    winner = np.where(a_wins, a, b)
    loser = np.where(a_wins, b, a)
    return users, winner, loser


def _chunks(n: int, d: int) -> list[tuple[int, int]]:
    per = max(1, _CHUNK_DRAWS // max(d, 1))
    return [(s, min(n, s + per)) for s in range(0, n, per)]


def iter_comparisons(inst: Instance, n: int, d: int, seed: int) -> Iterator[tuple]:
    """Yield (user, winner, loser) arrays of shape (users, d) chunk by chunk.

    Intended for instrumentation; ``sample_comparisons`` aggregates the same draws.
    """
    _check_sizes(n, d)
    if d == 0:
        return
    for lo, hi in _chunks(n, d):
        yield _draw_chunk(inst, seed, lo, hi, d)


def sample_comparisons(inst: Instance, n: int, d: int, seed: int,
                       threads: int | None = None) -> ComparisonCounts:
    """Draw n users with d comparisons each; deterministic in ``seed``."""
    _check_sizes(n, d)
    m = inst.m
    total = np.zeros(m * m, dtype=np.int64)
    if n == 0 or d == 0:
        return ComparisonCounts(total.reshape(m, m))

    def work(span):
        _, w, l = _draw_chunk(inst, seed, span[0], span[1], d)
        return np.bincount((w * m + l).ravel(), minlength=m * m).astype(np.int64)

    spans = _chunks(n, d)
    nthreads = min(threads or max_threads(), len(spans))
    if nthreads <= 1:
        for span in spans:
            total += work(span)
    else:
        with ThreadPoolExecutor(nthreads) as ex:
            for part in ex.map(work, spans):
                total += part
    return ComparisonCounts(total.reshape(m, m))


def empirical_win_rates(counts: ComparisonCounts) -> np.ndarray:
    """p_n[x, y] = #(x>y) / (#(x>y) + #(y>x)); unobserved pairs get 1/2."""
    w = counts.wins.astype(float)
    tot = w + w.T
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tot > 0, w / np.where(tot > 0, tot, 1.0), 0.5)
    np.fill_diagonal(p, 0.5)
    return p


# ---------------------------------------------------------------- JSON

def instance_to_dict(inst: Instance) -> dict:
    pd = inst.pairs
    if isinstance(pd, ProductOfMu):
        pairs = {"type": "mu", "mu": pd.mu.tolist()}
    else:
        pairs = {"type": "nu", "nu": [{"x": int(x), "y": int(y), "p": float(p)}
                                      for (x, y), p in zip(pd.pairs, pd.probs)]}
    return {
        "m": inst.m,
        "beta": inst.beta,
        "components": [{"weight": float(w), "utils": u.tolist()}
                       for w, u in zip(inst.mixture.weights, inst.mixture.utils)],
        "pairs": pairs,
    }


def _only_keys(obj: dict, allowed: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise ValueError(f"{where}: unknown field(s) {sorted(extra)}")
    missing = allowed - set(obj) - {"mu", "nu"}
    if missing:
        raise ValueError(f"{where}: missing field(s) {sorted(missing)}")


def instance_from_dict(obj: dict) -> Instance:
    _only_keys(obj, {"m", "beta", "components", "pairs"}, "instance")
    comps = []
    for i, c in enumerate(obj["components"]):
        _only_keys(c, {"weight", "utils"}, f"components[{i}]")
        comps.append((c["weight"], c["utils"]))
    mixture = UtilityMixture.from_components(comps)
    if mixture.m != obj["m"]:
        raise ValueError(f"m = {obj['m']} but utility vectors have length {mixture.m}")
    p = obj["pairs"]
    _only_keys(p, {"type", "mu", "nu"}, "pairs")
    if p["type"] == "mu":
        pairs: PairDistribution = ProductOfMu(p["mu"])
    elif p["type"] == "nu":
        for i, e in enumerate(p["nu"]):
            _only_keys(e, {"x", "y", "p"}, f"pairs.nu[{i}]")
        pairs = GeneralNu([(e["x"], e["y"]) for e in p["nu"]], [e["p"] for e in p["nu"]])
    else:
        raise ValueError(f"pairs.type must be 'mu' or 'nu', got {p['type']!r}")
    return Instance(mixture, obj["beta"], pairs)


def load_instance(path) -> Instance:
    with open(path) as fh:
        return instance_from_dict(json.load(fh))


def save_instance(inst: Instance, path) -> None:
    with open(path, "w") as fh:
        json.dump(instance_to_dict(inst), fh, indent=1)
        fh.write("\n")
