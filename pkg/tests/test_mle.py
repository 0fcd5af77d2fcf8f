import math

import numpy as np
import pytest
from scipy.optimize import minimize

from align_distort.core import (ComparisonCounts, GeneralNu, Instance, ProductOfMu,
                                UtilityMixture, expected_win_rates, sample_comparisons)
from align_distort.errors import SeparableDataError
from align_distort.instances import gen_unbounded_seq, random_instance
from align_distort.mle import fit_bt_mle, fit_bt_mle_population, stationarity_residual
from align_distort.rules import limiting_borda


def _neg_loglik(r, wins):
    d = r[:, None] - r[None, :]
    return np.sum(wins * np.logaddexp(0.0, -d))


class TestFitCounts:
    def test_two_alternatives_closed_form(self):
        r = fit_bt_mle(ComparisonCounts(np.array([[0, 30], [10, 0]])), ridge=0)
        assert r[0] - r[1] == pytest.approx(math.log(3), abs=1e-9)
        assert r.sum() == pytest.approx(0, abs=1e-14)

    def test_two_alternatives_grid_oracle(self):
        # brute-force search over the reward gap, refined on a fine grid
        wins = np.array([[0, 17], [6, 0]])
        grid = np.linspace(-5, 5, 100001)
        ll = 17 * -np.logaddexp(0, -grid) + 6 * -np.logaddexp(0, grid)
        best = grid[np.argmax(ll)]
        r = fit_bt_mle(ComparisonCounts(wins), ridge=0)
        assert abs((r[0] - r[1]) - best) <= 1e-4

    def test_symmetric_counts_zero(self):
        wins = np.array([[0, 4, 4], [4, 0, 4], [4, 4, 0]])
        np.testing.assert_allclose(fit_bt_mle(ComparisonCounts(wins), ridge=0), 0, atol=1e-12)

    def test_no_data_zero(self):
        np.testing.assert_array_equal(fit_bt_mle(ComparisonCounts(np.zeros((3, 3)))), 0)

    def test_general_optimizer_oracle(self, rng):
        for _ in range(10):
            wins = rng.integers(1, 40, size=(5, 5))
            np.fill_diagonal(wins, 0)
            ref = minimize(_neg_loglik, np.zeros(5), args=(wins,), method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 40000,
                                    "maxfev": 40000}).x
            ref -= ref.mean()
            r = fit_bt_mle(ComparisonCounts(wins), ridge=0)
            np.testing.assert_allclose(r, ref, atol=1e-5)
            assert _neg_loglik(r, wins) <= _neg_loglik(ref, wins) + 1e-9

    def test_separable_data_raises(self):
        wins = np.array([[0, 5, 2], [0, 0, 3], [0, 1, 0]])
        with pytest.raises(SeparableDataError) as err:
            fit_bt_mle(ComparisonCounts(wins), ridge=0)
        assert list(err.value.alternatives) == [0]

    def test_ridge_handles_separable_data(self):
        wins = np.array([[0, 5, 2], [0, 0, 3], [0, 1, 0]])
        r = fit_bt_mle(ComparisonCounts(wins), ridge=1e-3)
        assert np.all(np.isfinite(r)) and np.argmax(r) == 0

    def test_self_pairs_ignored(self):
        a = fit_bt_mle(ComparisonCounts(np.array([[0, 3], [1, 0]])), ridge=0)
        b = fit_bt_mle(ComparisonCounts(np.array([[9, 3], [1, 4]])), ridge=0)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_single_type_consistency(self):
        mix = UtilityMixture(np.array([1.0]), np.array([[0.9, 0.4, 0.0]]))
        inst = Instance(mix, 2.0, ProductOfMu(np.full(3, 1 / 3)))
        r = fit_bt_mle(sample_comparisons(inst, 10**6, 1, 17), ridge=0)
        np.testing.assert_allclose(r - r[2], [1.8, 0.8, 0.0], atol=0.05)

    def test_rejects_negative_ridge(self):
        with pytest.raises(ValueError):
            fit_bt_mle(ComparisonCounts(np.array([[0, 1], [1, 0]])), ridge=-1)


class TestFitPopulation:
    def test_all_half(self):
        r = fit_bt_mle_population(np.full((4, 4), 0.5), ProductOfMu(np.full(4, 0.25)))
        np.testing.assert_allclose(r, 0, atol=1e-14)

    def test_single_type_recovers_scaled_utility(self):
        u = np.array([0.2, 1.0, 0.5, 0.0])
        mix = UtilityMixture(np.array([1.0]), u[None, :])
        for pairs in (ProductOfMu(np.array([0.1, 0.2, 0.3, 0.4])),
                      random_instance(np.random.default_rng(3), m_range=(4, 4), pairs="nu").pairs):
            inst = Instance(mix, 3.0, pairs)
            r = fit_bt_mle_population(expected_win_rates(inst), pairs)
            np.testing.assert_allclose(r, 3.0 * (u - u.mean()), atol=1e-9)

    def test_stationarity(self, rng):
        for _ in range(50):
            inst = random_instance(rng, pairs=("mu", "nu")[rng.integers(2)])
            p = expected_win_rates(inst)
            r = fit_bt_mle_population(p, inst.pairs)
            assert stationarity_residual(r, p, inst.pairs) <= 1e-9

    def test_order_matches_limiting_borda(self, rng):
        # under product sampling the first-order conditions force the MLE and
        # the limiting Borda score to rank alternatives identically
        for _ in range(100):
            inst = random_instance(rng)
            p = expected_win_rates(inst)
            r = fit_bt_mle_population(p, inst.pairs)
            bc = limiting_borda(p, inst.pairs)
            for x in range(inst.m):
                for y in range(inst.m):
                    if bc[x] > bc[y] + 1e-9:
                        assert r[x] > r[y]

    def test_unbounded_sequence_rewards_increase(self):
        inst = gen_unbounded_seq(5.0, 6, 1e-3).instance
        r = fit_bt_mle_population(expected_win_rates(inst), inst.pairs)
        assert np.all(np.diff(r) > 0)

    def test_population_separable_raises(self):
        p = np.array([[0.5, 1.0], [0.0, 0.5]])
        with pytest.raises(SeparableDataError):
            fit_bt_mle_population(p, GeneralNu([(0, 1)], [1.0]))


class TestRidge:
    def test_default_ridge_effect_is_negligible(self, three_alt):
        # the default ridge only matters for separable data
        counts = sample_comparisons(three_alt, 5000, 1, 2)
        np.testing.assert_allclose(fit_bt_mle(counts), fit_bt_mle(counts, ridge=0), atol=1e-7)
