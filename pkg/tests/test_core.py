import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from align_distort.core import (ComparisonCounts, GeneralNu, Instance, ProductOfMu,
                                UtilityMixture, avg_util, avg_util_policy,
                                empirical_win_rates, expected_margins, expected_win_rates,
                                instance_from_dict, instance_to_dict, iter_comparisons,
                                load_instance, sample_comparisons, save_instance, sigmoid,
                                sigmoid_excess)
from align_distort.instances import gen_unbounded_seq, gen_universal_lb, random_instance


def _inst(weights, utils, beta=1.0, mu=None):
    utils = np.asarray(utils, float)
    m = utils.shape[1]
    mu = np.full(m, 1 / m) if mu is None else mu
    return Instance(UtilityMixture(np.asarray(weights, float), utils), beta, ProductOfMu(mu))


class TestSigmoid:
    def test_extreme_inputs(self):
        assert sigmoid(700.0) == 1.0
        assert sigmoid(-700.0) == pytest.approx(0.0, abs=1e-300)
        assert np.isfinite(sigmoid(-1e5))

    def test_excess_matches_difference(self):
        t = np.linspace(-30, 30, 601)
        np.testing.assert_allclose(sigmoid_excess(t), sigmoid(t) - 0.5, atol=1e-15)

    def test_excess_keeps_small_values(self):
        assert sigmoid_excess(1e-12) == pytest.approx(2.5e-13, rel=1e-12)


class TestValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            UtilityMixture(np.array([0.5, 0.6]), np.zeros((2, 3)))

    def test_weights_positive(self):
        with pytest.raises(ValueError, match="positive"):
            UtilityMixture(np.array([1.0, 0.0]), np.zeros((2, 3)))

    def test_utils_in_unit_interval(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            UtilityMixture(np.array([1.0]), np.array([[0.0, 1.5]]))

    def test_needs_two_alternatives(self):
        with pytest.raises(ValueError, match="m = 2"):
            UtilityMixture(np.array([1.0]), np.array([[0.5]]))

    def test_mu_positive(self):
        with pytest.raises(ValueError):
            ProductOfMu(np.array([1.0, 0.0]))

    def test_nu_covers_all_pairs(self):
        mix = UtilityMixture(np.array([1.0]), np.zeros((1, 3)))
        with pytest.raises(ValueError, match="every pair"):
            Instance(mix, 1.0, GeneralNu([(0, 1), (1, 2)], [0.5, 0.5]))

    def test_nu_rejects_self_pairs(self):
        with pytest.raises(ValueError, match="distinct"):
            GeneralNu([(0, 0), (0, 1)], [0.5, 0.5])

    def test_beta_positive(self):
        with pytest.raises(ValueError):
            _inst([1.0], [[0.0, 1.0]], beta=0.0)

    def test_counts_nonnegative(self):
        with pytest.raises(ValueError):
            ComparisonCounts(np.array([[0, -1], [1, 0]]))

    def test_instance_is_immutable(self, three_alt):
        with pytest.raises(ValueError):
            three_alt.mixture.utils[0, 0] = 0.3


class TestExpectedWinRates:
    def test_identical_components_give_half(self):
        inst = _inst([0.4, 0.6], [[0.2, 0.9, 0.5], [0.2, 0.9, 0.5]])
        p = expected_win_rates(inst)
        # identical vectors still differ across alternatives, so check a constant vector
        inst2 = _inst([0.4, 0.6], [[0.3, 0.3, 0.3], [0.7, 0.7, 0.7]])
        np.testing.assert_allclose(expected_win_rates(inst2), 0.5, atol=0)
        assert p[0, 1] < 0.5

    def test_two_component_oracle(self):
        # 0.3 sigma(2) + 0.7 sigma(-1), evaluated with math.exp before the build
        inst = _inst([0.3, 0.7], [[1.0, 0.0], [0.0, 0.5]], beta=2.0)
        assert expected_win_rates(inst)[0, 1] == pytest.approx(0.45249811835236126, abs=1e-15)

    def test_universal_instance_all_half(self):
        inst = gen_universal_lb(20, 5.0, 1e-3, 1.0).instance
        np.testing.assert_allclose(expected_win_rates(inst)[0, 1:], 0.5, atol=1e-12)

    def test_complement_and_diagonal(self, rng):
        for _ in range(200):
            p = expected_win_rates(random_instance(rng))
            np.testing.assert_allclose(p + p.T, 1.0, atol=1e-12)
            np.testing.assert_array_equal(np.diag(p), 0.5)
            assert p.min() >= 0 and p.max() <= 1

    def test_margins_match_rates(self, three_alt):
        np.testing.assert_allclose(expected_margins(three_alt),
                                   2 * expected_win_rates(three_alt) - 1, atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_sandwich_property(self, seed):
        from align_distort.instances import linearization_matrices
        inst = random_instance(np.random.default_rng(seed))
        excess = expected_win_rates(inst) - 0.5
        lo, hi = linearization_matrices(inst)
        assert np.all(excess - lo >= -1e-12)
        assert np.all(hi - excess >= -1e-12)


class TestAvgUtil:
    def test_single_component(self):
        inst = _inst([1.0], [[0.1, 0.7, 0.4]])
        np.testing.assert_array_equal(avg_util(inst), [0.1, 0.7, 0.4])

    def test_universal_instance_value(self):
        inst = gen_universal_lb(10, 5.0, 1e-3).instance
        # (sigma(5e-3) - 1/2) / (sigma(5) + sigma(5e-3) - 1) at 50 digits
        assert avg_util(inst)[0] == pytest.approx(0.0025275085088912747982, rel=1e-12)

    def test_sequence_first_is_one_third(self):
        inst = gen_unbounded_seq(5.0, 6, 1e-3).instance
        assert avg_util(inst)[0] == 1 / 3

    def test_policy_point_mass_and_uniform(self, three_alt):
        au = avg_util(three_alt)
        assert avg_util_policy(three_alt, [0, 1, 0]) == au[1]
        flat = _inst([0.5, 0.5], [[0.4] * 4, [0.4] * 4])
        assert avg_util_policy(flat, np.full(4, 0.25)) == pytest.approx(0.4)

    def test_policy_rejects_bad_vector(self, three_alt):
        with pytest.raises(ValueError):
            avg_util_policy(three_alt, [0.5, 0.5])

    def test_monte_carlo_oracle(self, rng):
        inst = random_instance(rng, m_range=(5, 5), k_range=(4, 4))
        pi = rng.dirichlet(np.ones(5))
        draws = 10**6
        x = rng.choice(5, size=draws, p=pi)
        k = rng.choice(4, size=draws, p=inst.mixture.weights)
        vals = inst.mixture.utils[k, x]
        se = vals.std() / math.sqrt(draws)
        assert abs(avg_util_policy(inst, pi) - vals.mean()) <= 3 * se

    def test_convex_hull(self, rng):
        for _ in range(100):
            inst = random_instance(rng)
            au = avg_util(inst)
            u = inst.mixture.utils
            assert np.all(au >= u.min(axis=0) - 1e-15)
            assert np.all(au <= u.max(axis=0) + 1e-15)


class TestSampler:
    def test_zero_sizes(self, three_alt):
        assert sample_comparisons(three_alt, 0, 5, 1).total == 0
        assert sample_comparisons(three_alt, 5, 0, 1).total == 0

    def test_total_mass(self, three_alt):
        assert sample_comparisons(three_alt, 1234, 3, 9).total == 1234 * 3

    def test_determinism_and_seed_sensitivity(self, three_alt):
        a = sample_comparisons(three_alt, 5000, 2, 11)
        b = sample_comparisons(three_alt, 5000, 2, 11)
        c = sample_comparisons(three_alt, 5000, 2, 12)
        np.testing.assert_array_equal(a.wins, b.wins)
        assert not np.array_equal(a.wins, c.wins)

    def test_threads_do_not_change_counts(self, three_alt, monkeypatch):
        import align_distort.core as core
        monkeypatch.setattr(core, "_CHUNK_DRAWS", 1000)
        serial = sample_comparisons(three_alt, 20000, 3, 5, threads=1)
        parallel = sample_comparisons(three_alt, 20000, 3, 5, threads=4)
        np.testing.assert_array_equal(serial.wins, parallel.wins)

    def test_expected_counts_within_four_sigma(self, three_alt):
        n = 10**6
        counts = sample_comparisons(three_alt, n, 1, 2024).wins
        p = expected_win_rates(three_alt)
        mu = three_alt.pairs.mu
        for x in range(3):
            for y in range(3):
                if x == y:
                    continue
                q = 2 * mu[x] * mu[y] * p[x, y]
                sd = math.sqrt(n * q * (1 - q))
                assert abs(counts[x, y] - n * q) <= 4 * sd

    def test_self_pairs_on_diagonal(self, three_alt):
        n = 10**5
        diag = np.diag(sample_comparisons(three_alt, n, 1, 3).wins)
        q = 1 / 9
        assert np.all(np.abs(diag - n * q) <= 4 * math.sqrt(n * q * (1 - q)))

    def test_general_nu_has_no_self_pairs(self, rng):
        inst = random_instance(rng, m_range=(4, 4), pairs="nu")
        assert np.all(np.diag(sample_comparisons(inst, 1000, 2, 1).wins) == 0)

    def test_users_never_contradict_themselves(self):
        mix = UtilityMixture(np.array([0.5, 0.5]), np.array([[0.6, 0.4], [0.3, 0.7]]))
        inst = Instance(mix, 1.0, GeneralNu([(0, 1)], [1.0]))
        for users, winners, _ in iter_comparisons(inst, 2000, 10, 8):
            a_wins = (winners == 0).sum(axis=1)
            assert np.all((a_wins == 0) | (a_wins == 10))
        # across users both outcomes occur
        counts = sample_comparisons(inst, 2000, 10, 8).wins
        assert counts[0, 1] > 0 and counts[1, 0] > 0

    def test_overflow_rejected(self, three_alt):
        with pytest.raises(OverflowError):
            sample_comparisons(three_alt, 2**62, 4, 0)

    def test_negative_rejected(self, three_alt):
        with pytest.raises(ValueError):
            sample_comparisons(three_alt, -1, 1, 0)


class TestEmpiricalWinRates:
    def test_arithmetic(self):
        p = empirical_win_rates(ComparisonCounts(np.array([[0, 3], [1, 0]])))
        assert p[0, 1] == 0.75 and p[1, 0] == 0.25

    def test_unobserved_half(self):
        np.testing.assert_array_equal(empirical_win_rates(ComparisonCounts(np.zeros((3, 3)))),
                                      0.5)

    def test_error_shrinks_like_root_n(self, three_alt):
        p = expected_win_rates(three_alt)
        errs = [np.abs(empirical_win_rates(sample_comparisons(three_alt, n, 2, 1)) - p).max()
                for n in (10**3, 10**5)]
        assert errs[1] < errs[0] / 3


class TestJson:
    def test_round_trip(self, tmp_path, rng):
        for pairs in ("mu", "nu"):
            inst = random_instance(rng, pairs=pairs)
            path = tmp_path / f"{pairs}.json"
            save_instance(inst, path)
            back = load_instance(path)
            np.testing.assert_array_equal(expected_win_rates(back), expected_win_rates(inst))
            assert instance_to_dict(back) == instance_to_dict(inst)

    def test_unknown_field_rejected(self, three_alt):
        d = instance_to_dict(three_alt)
        d["extra"] = 1
        with pytest.raises(ValueError, match="unknown"):
            instance_from_dict(d)

    def test_m_mismatch_rejected(self, three_alt):
        d = json.loads(json.dumps(instance_to_dict(three_alt)))
        d["m"] = 4
        with pytest.raises(ValueError):
            instance_from_dict(d)
