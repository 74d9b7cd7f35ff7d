"""Estimator-style wrappers and input validation.

The solvers take a :class:`~aimr.problems.Problem` where an estimator would
take ``X``; ``fit`` stores the low-rank solution in ``solution_`` and the
iteration record in ``trace_`` (or ``diagnostics_``).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .gradient import SolverConfig, cmr_solve, gradient_solve
from .greedy import GreedySchedule, weak_greedy_solve
from .residual import LambdaConfig
from .tensor import CanonicalTensor, FormatSpec, RankOneMetric, ct_from_dense, ct_to_dense, svd2d_project


def check_tensor(x, dims=None) -> CanonicalTensor:
    """Return ``x`` as a :class:`CanonicalTensor` (order-2 arrays are converted exactly)."""
    if isinstance(x, CanonicalTensor):
        t = x
    else:
        arr = np.asarray(x, dtype=float)
        if arr.ndim != 2:
            raise ValueError("expected a CanonicalTensor or a 2-D array, got ndim=%d" % arr.ndim)
        if not np.all(np.isfinite(arr)):
            raise ValueError("input contains NaN or inf")
        t = ct_from_dense(arr)
    if dims is not None and tuple(t.dims) != tuple(dims):
        raise ValueError("expected dims %s, got %s" % (tuple(dims), t.dims))
    for f in t.factors:
        if not np.all(np.isfinite(f)):
            raise ValueError("tensor factors contain NaN or inf")
    return t


def check_metric(m, dims) -> RankOneMetric:
    """``None`` means the canonical metric on ``dims``."""
    if m is None:
        return RankOneMetric.identity(dims)
    if not isinstance(m, RankOneMetric):
        raise TypeError("metric must be a RankOneMetric, got %s" % type(m).__name__)
    if m.dims != tuple(dims):
        raise ValueError("metric dims %s do not match %s" % (m.dims, tuple(dims)))
    return m


def check_problem(problem):
    for name in ("a", "b", "rx"):
        if not hasattr(problem, name):
            raise TypeError("problem lacks attribute %r" % name)
    if tuple(problem.a.col_dims) != tuple(problem.b.dims):
        raise ValueError("operator and right-hand side dims differ")
    check_metric(problem.rx, problem.b.dims)
    check_tensor(problem.b)
    return problem


class AIMRSolver(BaseEstimator):
    """Direct minimal residual approximation in the rank-``rank`` canonical set.

    Parameters
    ----------
    rank : int
    delta : float
        Relative precision of the residual approximations; 0 uses exact
        residuals (requires an oracle-sized problem).
    projector : {"svd2d", "als", "greedy-rank-one"}
    p : int
        Lag of the stagnation test of the residual approximation.
    """

    def __init__(self, rank=10, delta=0.2, max_outer=100, projector="svd2d", p=20,
                 stop_tol=1e-10, lambda_mode="greedy", seed=0):
        self.rank = rank
        self.delta = delta
        self.max_outer = max_outer
        self.projector = projector
        self.p = p
        self.stop_tol = stop_tol
        self.lambda_mode = lambda_mode
        self.seed = seed

    def _config(self):
        lam = LambdaConfig(delta=self.delta, p=self.p) if self.delta > 0 else None
        return SolverConfig(delta=self.delta, max_outer=self.max_outer,
                            projector=FormatSpec(self.rank, self.projector), lambda_cfg=lam,
                            stop_tol=self.stop_tol, lambda_mode=self.lambda_mode, seed=self.seed)

    def fit(self, problem, y=None, oracle=None):
        check_problem(problem)
        self.solution_, self.trace_ = gradient_solve(problem, self._config(), oracle=oracle)
        self.problem_ = problem
        return self

    def predict(self, xi):
        """Spatial fields of the fitted solution at input samples ``xi``."""
        check_is_fitted(self, "solution_")
        return self.problem_.evaluate(self.solution_, xi)


class CMRSolver(BaseEstimator):
    """Canonical-norm residual minimization (baseline)."""

    def __init__(self, rank=10, strategy="direct", seed=0):
        self.rank = rank
        self.strategy = strategy
        self.seed = seed

    def fit(self, problem, y=None, oracle=None):
        check_problem(problem)
        cfg = SolverConfig(projector=FormatSpec(self.rank), seed=self.seed)
        self.solution_, self.trace_ = cmr_solve(problem, FormatSpec(self.rank), cfg,
                                                strategy=self.strategy, oracle=oracle)
        self.problem_ = problem
        return self

    def predict(self, xi):
        check_is_fitted(self, "solution_")
        return self.problem_.evaluate(self.solution_, xi)


class GreedyAIMR(BaseEstimator):
    """Weak greedy sum of rank-one minimal residual corrections."""

    def __init__(self, r_max=20, delta=0.2, epsilon=0.1, stop_tol=1e-8, max_outer=5, p=20, seed=0):
        self.r_max = r_max
        self.delta = delta
        self.epsilon = epsilon
        self.stop_tol = stop_tol
        self.max_outer = max_outer
        self.p = p
        self.seed = seed

    def fit(self, problem, y=None, oracle=None):
        check_problem(problem)
        sched = GreedySchedule(r_max=self.r_max, delta=self.delta, epsilon=self.epsilon,
                               stop_tol=self.stop_tol)
        d0 = sched.delta_m(1)
        cfg = SolverConfig(delta=d0, max_outer=self.max_outer, seed=self.seed,
                           lambda_cfg=LambdaConfig(delta=d0, p=self.p))
        self.solution_, self.diagnostics_ = weak_greedy_solve(problem, sched, cfg, oracle=oracle)
        self.problem_ = problem
        return self

    def predict(self, xi):
        check_is_fitted(self, "solution_")
        return self.problem_.evaluate(self.solution_, xi)


class LowRankProjector(TransformerMixin, BaseEstimator):
    """Best rank-``rank`` approximation of order-2 tensors in a rank-one metric.

    Arrays in, arrays out; canonical tensors in, canonical tensors out.
    """

    def __init__(self, rank=1, metric=None):
        self.rank = rank
        self.metric = metric

    def fit(self, X, y=None):
        t = check_tensor(X)
        self.metric_ = check_metric(self.metric, t.dims)
        self.dims_ = t.dims
        return self

    def transform(self, X):
        check_is_fitted(self, "metric_")
        t = check_tensor(X, self.dims_)
        out = svd2d_project(t, self.rank, self.metric_)
        return out if isinstance(X, CanonicalTensor) else ct_to_dense(out)
