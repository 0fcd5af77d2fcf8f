"""Distortion of aggregation methods against the KL-ball utility benchmark."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _hashrng
from .core import (ComparisonCounts, Instance, ProductOfMu, avg_util, avg_util_policy,
                   empirical_win_rates, expected_margins, expected_win_rates, max_threads,
                   sample_comparisons)
from .instances import nlhf_bound
from .mle import fit_bt_mle, fit_bt_mle_population
from .policy import KLBall, linear_max_over_ball, nlhf_policy, optimal_policy
from .rules import (borda_rule, borda_scores, limiting_borda, margin_matrix,
                    maximal_lotteries)

METHODS = ("borda", "maximal_lotteries", "rlhf", "nlhf")
REPORT_FIELDS = ("method", "mode", "optimal_util", "method_util", "ratio", "ratio_infinite",
                 "trials", "n", "d", "std_err", "ratio_std_err", "seed")


@dataclass
class DistortionReport:
    method: str
    mode: str
    optimal_util: float
    method_util: float
    ratio: float
    ratio_infinite: bool
    trials: int
    n: int | None
    d: int | None
    std_err: float
    ratio_std_err: float
    seed: int | None
    policy: list = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(opt: float, util: float) -> tuple[float, bool]:
    if util <= 0:
        if opt <= 0:
            return 1.0, False  # nothing has positive utility: 0/0 read as no loss
        return math.inf, True
    return opt / util, False


def _check_method(inst: Instance, method: str) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "borda" and not isinstance(inst.pairs, ProductOfMu):
        raise ValueError("Borda needs a product-of-mu pair distribution")


def population_policy(inst: Instance, method: str, ball: KLBall, tol: float = 1e-9,
                      tie_tol: float = 1e-9) -> np.ndarray:
    """Output of ``method`` when fed exact expected win rates."""
    _check_method(inst, method)
    if method == "borda":
        return borda_rule(limiting_borda(expected_win_rates(inst), inst.pairs), tie_tol)
    if method == "maximal_lotteries":
        return maximal_lotteries(expected_margins(inst), tol)
    if method == "rlhf":
        r = fit_bt_mle_population(expected_win_rates(inst), inst.pairs)
        return linear_max_over_ball(r, ball)
    return nlhf_policy(expected_margins(inst), ball, tol)


def empirical_policy(counts: ComparisonCounts, method: str, ball: KLBall,
                     tol: float = 1e-9, tie_tol: float = 1e-9, ridge: float = 1e-9) -> np.ndarray:
    if method == "borda":
        return borda_rule(borda_scores(counts), tie_tol)
    if method == "maximal_lotteries":
        return maximal_lotteries(margin_matrix(empirical_win_rates(counts)), tol)
    if method == "rlhf":
        return linear_max_over_ball(fit_bt_mle(counts, ridge=ridge), ball)
    if method == "nlhf":
        return nlhf_policy(margin_matrix(empirical_win_rates(counts)), ball, tol)
    raise ValueError(f"unknown method {method!r}")


def _ball_or_simplex(inst: Instance, ball: KLBall | None) -> KLBall:
    if ball is None:
        return KLBall.simplex(inst.m)
    if ball.m != inst.m:
        raise ValueError("ball and instance sizes differ")
    return ball


def distortion_population(inst: Instance, method: str, ball: KLBall | None = None,
                          tol: float = 1e-9) -> DistortionReport:
    """Population-limit distortion; the default ball is the whole simplex."""
    ball = _ball_or_simplex(inst, ball)
    pi = population_policy(inst, method, ball, tol)
    opt = avg_util_policy(inst, optimal_policy(inst, ball))
    util = avg_util_policy(inst, pi)
    ratio, inf = _ratio(opt, util)
    return DistortionReport(method, "population", opt, util, ratio, inf, 1, None, None,
                            0.0, 0.0, None, pi.tolist())


def trial_seed(seed: int, trial: int) -> int:
    return _hashrng.derive_seed(seed, trial)


def distortion_empirical(inst: Instance, method: str, ball: KLBall | None, n: int, d: int,
                         trials: int, seed: int, tol: float = 1e-9,
                         ridge: float = 1e-9) -> DistortionReport:
    """Monte Carlo distortion over ``trials`` independent seeded datasets."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    _check_method(inst, method)
    ball = _ball_or_simplex(inst, ball)
    au = avg_util(inst)

    def one(t):
        counts = sample_comparisons(inst, n, d, trial_seed(seed, t), threads=1)
        try:
            pi = empirical_policy(counts, method, ball, tol, ridge=ridge)
        except Exception as exc:
            raise RuntimeError(f"trial {t} (seed {trial_seed(seed, t)}) failed: {exc}") from exc
        return pi

    nthreads = min(max_threads(), trials)
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as ex:
            policies = list(ex.map(one, range(trials)))
    else:
        policies = [one(t) for t in range(trials)]
    utils = np.array([au @ p for p in policies])
    opt = avg_util_policy(inst, optimal_policy(inst, ball))
    mean = float(utils.mean())
    se = float(utils.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    ratio, inf = _ratio(opt, mean)
    ratio_se = opt * se / mean ** 2 if not inf else math.inf
    return DistortionReport(method, "empirical", opt, mean, ratio, inf, trials, n, d, se,
                            ratio_se, seed, np.mean(policies, axis=0).tolist())


# ---------------------------------------------------------------- convergence

@dataclass
class ConvergenceTable:
    quantity: str
    d: int
    trials: int
    seed: int
    n: list
    mean_error: list
    std_err: list
    slope: float

    def to_dict(self) -> dict:
        return asdict(self)


def _fit_slope(ns, errs) -> float:
    return float(np.polyfit(np.log(ns), np.log(errs), 1)[0])


def convergence_tables(inst: Instance, quantities, n_grid, d: int, trials: int,
                       seed: int) -> dict[str, ConvergenceTable]:
    """Max-entry errors of empirical quantities for several n, sharing the samples."""
    n_grid = [int(v) for v in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be increasing")
    quantities = list(quantities)
    for q in quantities:
        if q not in ("win_rates", "borda"):
            raise ValueError(f"unknown quantity {q!r}")
        if q == "borda" and not isinstance(inst.pairs, ProductOfMu):
            raise ValueError("Borda convergence needs a product-of-mu pair distribution")
    p = expected_win_rates(inst)
    bc = limiting_borda(p, inst.pairs) if "borda" in quantities else None

    def one(job):
        i, t = job
        counts = sample_comparisons(inst, n_grid[i], d, _hashrng.derive_seed(seed, i, t),
                                    threads=1)
        out = {}
        if "win_rates" in quantities:
            out["win_rates"] = float(np.max(np.abs(empirical_win_rates(counts) - p)))
        if "borda" in quantities:
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out["borda"] = float(np.max(np.abs(borda_scores(counts) - bc)))
        return out

    jobs = [(i, t) for i in range(len(n_grid)) for t in range(trials)]
    nthreads = min(max_threads(), len(jobs))
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as ex:
            results = list(ex.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    tables = {}
    for q in quantities:
        errs = np.array([r[q] for r in results]).reshape(len(n_grid), trials)
        mean = errs.mean(axis=1)
        se = errs.std(axis=1, ddof=1) / math.sqrt(trials) if trials > 1 else np.zeros(len(n_grid))
        tables[q] = ConvergenceTable(q, d, trials, seed, n_grid, mean.tolist(), se.tolist(),
                                     _fit_slope(n_grid, mean))
    return tables


def convergence_experiment(inst: Instance, quantity: str, n_grid, d: int, trials: int,
                           seed: int) -> ConvergenceTable:
    return convergence_tables(inst, [quantity], n_grid, d, trials, seed)[quantity]


def borda_bound(beta: float) -> float:
    """Population Borda distortion cap: the square of ``nlhf_bound``."""
    return nlhf_bound(beta) ** 2


# ---------------------------------------------------------------- output

def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def reports_to_csv(reports, extra: dict | None = None) -> str:
    """CSV with one row per report; ``extra`` columns (e.g. config echo) prepended."""
    extra = extra or {}
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["schema_version", *extra, *REPORT_FIELDS],
                            lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow({"schema_version": 1, **extra, **rep.row()})
    return buf.getvalue()


def reports_to_json(reports, extra: dict | None = None) -> str:
    out = {"schema_version": 1, **(extra or {}),
           "reports": [{k: _clean(v) for k, v in r.to_dict().items()} for r in reports]}
    return json.dumps(out, indent=1, sort_keys=True) + "\n"
