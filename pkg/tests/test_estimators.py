"""Estimator-style wrappers and input validation."""
import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from aimr.estimators import (
    AIMRSolver,
    CMRSolver,
    GreedyAIMR,
    LowRankProjector,
    check_metric,
    check_problem,
    check_tensor,
)
from aimr.gradient import SolverConfig, gradient_solve
from aimr.problems import build_identity_problem
from aimr.residual import LambdaConfig
from aimr.tensor import CanonicalTensor, FormatSpec, RankOneMetric, ct_to_dense

from conftest import random_ct


class TestValidation:
    def test_check_tensor_array(self, rng):
        x = rng.standard_normal((5, 4))
        np.testing.assert_allclose(ct_to_dense(check_tensor(x)), x, atol=1e-13)

    def test_check_tensor_rejects(self, rng):
        with pytest.raises(ValueError):
            check_tensor(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            check_tensor(np.array([[1.0, np.nan]]))
        with pytest.raises(ValueError):
            check_tensor(random_ct(rng, (3, 2), 1), dims=(2, 3))
        with pytest.raises(ValueError):
            check_tensor(CanonicalTensor([np.array([[np.inf], [1.0]]), np.ones((2, 1))]))

    def test_check_metric(self):
        assert check_metric(None, (3, 2)).kind == "identity"
        with pytest.raises(TypeError):
            check_metric(np.eye(3), (3, 2))
        with pytest.raises(ValueError):
            check_metric(RankOneMetric.identity((2, 3)), (3, 2))

    def test_check_problem(self, rad6):
        assert check_problem(rad6) is rad6
        with pytest.raises(TypeError):
            check_problem(object())


class TestLowRankProjector:
    def test_array_matches_svd(self, rng):
        x = rng.standard_normal((7, 5))
        y = LowRankProjector(rank=2).fit_transform(x)
        u, s, vt = np.linalg.svd(x)
        np.testing.assert_allclose(y, (u[:, :2] * s[:2]) @ vt[:2], atol=1e-12)

    def test_tensor_in_tensor_out(self, rng):
        t = random_ct(rng, (6, 4), 3)
        out = LowRankProjector(rank=1).fit(t).transform(t)
        assert isinstance(out, CanonicalTensor) and out.rank == 1

    def test_not_fitted(self, rng):
        with pytest.raises(NotFittedError):
            LowRankProjector().transform(rng.standard_normal((3, 3)))

    def test_params_and_clone(self):
        est = LowRankProjector(rank=3)
        assert est.get_params() == {"rank": 3, "metric": None}
        c = clone(est.set_params(rank=4))
        assert c.rank == 4 and not hasattr(c, "metric_")


class TestSolvers:
    def test_aimr_matches_functional_api(self, rad6):
        est = AIMRSolver(rank=3, delta=0.2, max_outer=3, p=5).fit(rad6)
        cfg = SolverConfig(delta=0.2, max_outer=3, projector=FormatSpec(3), lambda_cfg=LambdaConfig(p=5))
        u, _ = gradient_solve(rad6, cfg)
        np.testing.assert_array_equal(ct_to_dense(est.solution_), ct_to_dense(u))
        xi = rad6.sample_inputs(np.random.default_rng(0), 4)
        assert est.predict(xi).shape == (rad6.dims[0], 4)

    def test_identity_problem(self):
        prob = build_identity_problem((6, 5), rank=2, seed=1)
        est = AIMRSolver(rank=2, delta=0.0, max_outer=5).fit(prob)
        np.testing.assert_allclose(ct_to_dense(est.solution_), ct_to_dense(prob.b), atol=1e-10)

    def test_cmr(self, rad6):
        est = CMRSolver(rank=2).fit(rad6)
        assert est.solution_.rank <= 2
        assert len(est.trace_) >= 1

    def test_greedy(self, rad6):
        est = GreedyAIMR(r_max=2, max_outer=2, p=3).fit(rad6)
        assert est.solution_.rank == len(est.diagnostics_.steps)

    def test_params_clone_unfitted(self):
        for est in (AIMRSolver(rank=4), CMRSolver(strategy="greedy"), GreedyAIMR(delta=0.1)):
            c = clone(est)
            assert c.get_params() == est.get_params()
            with pytest.raises(NotFittedError):
                c.predict(None)
