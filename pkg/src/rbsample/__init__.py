"""Reduced-basis greedy sampling for stable variational problems.

Modules
-------
kernel   Gram-matrix linear algebra (Cholesky solves, dual norms, inf-sup).
truth    P1 truth discretization of the parametric transport-diffusion problem.
wgreedy  Abstract weak greedy on compact sets with width oracles and rate checks.
rbgreedy Residual-based greedy for the Galerkin (coercive) setting.
stab     Double greedy with saddle-point reduced models and test-space stabilization.
goal     Primal-dual goal-oriented evaluation.
cli      Command-line driver.
"""

__version__ = "0.1.0"

from .kernel import FactorizationError, SpdGram, dual_norm, min_generalized_singular, spd_solve
from .truth import (
    ParameterPoint,
    TruthModel,
    TruthStabilityError,
    angle_grid,
    assemble_truth,
    dual_truth_solve,
    truth_solve,
)
from .wgreedy import CompactSet, verify_delayed_comparison, verify_rate_theorems, weak_greedy_run, width_oracle
from .rbgreedy import ReducedSpace, ResidualOfflineData, galerkin_reduced_solve, sga_run
from .stab import SaddleReducedModel, saddle_reduced_solve, sga_dou_run, stabilize, worst_case_infsup
from .goal import GoalFunctional, budget_split, corrected_functional, primal_dual_pipeline

__all__ = [
    "FactorizationError", "SpdGram", "dual_norm", "min_generalized_singular", "spd_solve",
    "ParameterPoint", "TruthModel", "TruthStabilityError", "angle_grid", "assemble_truth",
    "dual_truth_solve", "truth_solve",
    "CompactSet", "verify_delayed_comparison", "verify_rate_theorems", "weak_greedy_run",
    "width_oracle",
    "ReducedSpace", "ResidualOfflineData", "galerkin_reduced_solve", "sga_run",
    "SaddleReducedModel", "saddle_reduced_solve", "sga_dou_run", "stabilize",
    "worst_case_infsup",
    "GoalFunctional", "budget_split", "corrected_functional", "primal_dual_pipeline",
]
