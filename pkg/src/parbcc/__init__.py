"""Power allocation for the parallel broadcast channel with one common and two
confidential messages, with margin-based handling of noisy channel estimates."""

from .allocator import (AllocationResult, BracketError, Diagnostics, DualState, HelperTerms,
                        SolverConfig, allocate, helper_terms, search_lambda, search_mu,
                        solve_p1_at_lambda, solve_p3_at_lambda_mu)
from .channel import (ChannelPrior, ChannelRealization, EstimationModel, GainBounds, Partition,
                      conditional_gain_cdf, conditional_gain_density, gain_bounds, partition,
                      sample_realization)
from .rates import (PowerAllocation, RateTriple, Weights, common_rate, common_rate_user,
                    confidential_rate, rate_triple, weighted_sum_rate)

__version__ = "0.1.0"
