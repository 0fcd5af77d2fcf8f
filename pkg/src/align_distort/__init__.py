"""Distortion of preference aggregation and alignment under Bradley-Terry populations."""
from .core import (ComparisonCounts, GeneralNu, Instance, ProductOfMu, UtilityMixture,
                   avg_util, avg_util_policy, empirical_win_rates, expected_margins,
                   expected_win_rates, instance_from_dict, instance_to_dict, load_instance,
                   sample_comparisons, save_instance, sigmoid)
from .distortion import (DistortionReport, borda_bound, convergence_experiment,
                         distortion_empirical, distortion_population)
from .errors import BracketError, ConvergenceError, SeparableDataError
from .instances import (gen_borda_lb, gen_rlhf_lb, gen_unbounded_seq, gen_universal_lb,
                        linearization_bounds, nlhf_bound)
from .mle import fit_bt_mle, fit_bt_mle_population
from .policy import (KLBall, dpo_policy, exploitability, kl_div, linear_max_over_ball,
                     nlhf_policy, optimal_policy, regularized_linear_max, rlhf_policy)
from .rules import (borda_rule, borda_scores, limiting_borda, margin_matrix,
                    maximal_lotteries)

__version__ = "0.1.0"
