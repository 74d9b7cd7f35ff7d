"""Perturbed ideal minimal-residual low-rank tensor solvers."""
from .tensor import (
    CanonicalTensor,
    FormatSpec,
    GuardExceeded,
    RankOneMetric,
    ct_add,
    ct_from_dense,
    ct_inner,
    ct_norm,
    ct_scale,
    ct_to_dense,
    svd2d_project,
)
from .operators import (
    DualMetric,
    LowRankOperator,
    dual_apply,
    metric_solve,
    op_adjoint,
    op_apply,
    spectral_bounds,
)
from .residual import LambdaConfig, ResidualProblem, lambda_delta
from .gradient import (
    IterationTrace,
    NumericalDivergence,
    SolverConfig,
    cmr_solve,
    gradient_solve,
    ideal_reference_solve,
)
from .greedy import GreedySchedule, greedy_identities_audit, weak_greedy_solve
from .estimators import AIMRSolver, CMRSolver, GreedyAIMR, LowRankProjector

__version__ = "0.1.0"

__all__ = [
    "AIMRSolver", "CMRSolver", "CanonicalTensor", "DualMetric", "FormatSpec", "GreedyAIMR",
    "GreedySchedule", "GuardExceeded", "IterationTrace", "LambdaConfig", "LowRankOperator",
    "LowRankProjector", "NumericalDivergence", "RankOneMetric", "ResidualProblem", "SolverConfig",
    "cmr_solve", "ct_add", "ct_from_dense", "ct_inner", "ct_norm", "ct_scale", "ct_to_dense",
    "dual_apply", "gradient_solve", "greedy_identities_audit", "ideal_reference_solve",
    "lambda_delta", "metric_solve", "op_adjoint", "op_apply", "spectral_bounds", "svd2d_project",
    "weak_greedy_solve",
]
