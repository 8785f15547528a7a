"""BSDEs driven by multi-dimensional RCLL martingales, solved exactly on finite scenario trees."""

__version__ = "0.1.0"

from .tree import (AdaptedProcess, FilteredSpace, JumpChannel, PredictableProcess, TreeError, canonical_tree,
                   constant_channel, random_tree, uniform_tree)
from .calculus import (conditional_expectation, dual_predictable_projection, doleans_measure,
                       predictable_covariation, quadratic_covariation, weighted_norms)
from .models import (MartingaleModel, PRPViolation, block_model, build_brownian_proxy, build_default_martingale,
                     build_jump_block, build_poisson_martingale, null_model, represent_martingale)
from .generators import make_generator, verify_m_lipschitz
from .solver import (BSDEProblem, Solution, SolverError, apriori_check, picard_iterate, solve_backward_exact,
                     stability_ladder)
from .linear import LinearCoefficients, build_exponential_bundle, weighted_martingale_check, linear_solution
from .comparison import (check_hypotheses, continuous_case_condition, linearize, verify_comparison,
                         verify_strict_comparison)

__all__ = [name for name in dir() if not name.startswith("_")]
