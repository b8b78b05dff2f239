from .assignment import linear_sum_assignment
from .dynamics import fit_transition, least_squares_transition
from .lasso import LassoProblem, cd_lasso_variant, soft_threshold
from .traces import (
    DecorrelationTerms,
    TraceSolverWarning,
    smoothed_objective,
    solve_traces,
    trace_objective,
)

__all__ = [
    "DecorrelationTerms",
    "LassoProblem",
    "TraceSolverWarning",
    "cd_lasso_variant",
    "fit_transition",
    "least_squares_transition",
    "linear_sum_assignment",
    "smoothed_objective",
    "soft_threshold",
    "solve_traces",
    "trace_objective",
]
