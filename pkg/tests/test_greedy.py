"""Weak greedy rank-one construction and its energy identities."""
import json

import numpy as np
import pytest

from aimr.gradient import SolverConfig
from aimr.greedy import (
    DIAG_FIELDS,
    GreedySchedule,
    gamma_from_delta,
    greedy_condition_check,
    greedy_identities_audit,
    mu_from_alpha,
    weak_greedy_solve,
)
from aimr.problems import build_identity_problem
from aimr.residual import LambdaConfig
from aimr.tensor import RankOneMetric, ct_add, ct_from_dense, ct_norm, ct_scale, ct_to_dense, svd2d_project


def svd_deflation(x, steps, rx, scale=1.0):
    """Corrections ``scale * w_m`` with ``w_m`` the exact best rank-one term of the current remainder."""
    f = ct_from_dense(x)
    out = []
    for _ in range(steps):
        w = ct_scale(svd2d_project(f, 1, rx), scale)
        out.append(w)
        f = ct_from_dense(ct_to_dense(f) - ct_to_dense(w))
    return out


class TestConditionCheck:
    def test_zero_alpha(self):
        for gamma in (0.0, 0.5, 3.0):
            for eps in (0.01, 0.5, 0.99):
                assert greedy_condition_check(0.0, gamma, eps)

    def test_gamma_zero_limit(self):
        assert greedy_condition_check(0.999, 0.0, 0.5)

    def test_threshold_example(self):
        assert 0.9 / 2.15 == pytest.approx(0.4186, abs=1e-4)
        assert greedy_condition_check(0.6, 0.5, 0.1)
        assert not greedy_condition_check(0.7, 0.5, 0.1)

    def test_infinite_gamma(self):
        assert not greedy_condition_check(0.1, float("inf"), 0.1)

    def test_invalid(self):
        with pytest.raises(ValueError):
            greedy_condition_check(0.1, 0.5, 1.5)


class TestSchedule:
    def test_gamma_from_delta(self):
        assert gamma_from_delta(0.2) == pytest.approx(2 * 0.2 / 0.6 * 1.001)
        assert gamma_from_delta(0.2) > 2 * 0.2 / (1 - 0.4)
        assert gamma_from_delta(0.5) == float("inf")

    def test_sequence(self):
        s = GreedySchedule(delta=[0.3, 0.2, 0.1])
        assert [s.delta_m(m) for m in (1, 2, 3, 7)] == [0.3, 0.2, 0.1, 0.1]

    @pytest.mark.parametrize("kw", [{"r_max": 0}, {"epsilon": 0.0}, {"epsilon": 1.0}, {"delta": 1.2}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GreedySchedule(**kw)

    def test_mu(self):
        assert mu_from_alpha(0.0, 0.5) == 1.0
        assert mu_from_alpha(0.5, 0.0) == pytest.approx(1.0)
        assert mu_from_alpha(0.9, 1.0) == 0.0
        assert mu_from_alpha(1.0, 0.1) == 0.0


class TestAudit:
    def test_exact_corrections(self, rng):
        x = rng.standard_normal((8, 7))
        rx = RankOneMetric.identity((8, 7))
        rep = greedy_identities_audit(ct_from_dense(x), svd_deflation(x, 5, rx), rx)
        assert rep.ok, rep.failures
        for s in rep.steps:
            assert s.kappa == pytest.approx(1.0, abs=1e-8)

    def test_scaled_corrections(self, rng):
        x = rng.standard_normal((8, 7))
        rx = RankOneMetric.diagonal([rng.uniform(0.5, 3, 8), rng.uniform(0.5, 3, 7)])
        corr = svd_deflation(x, 5, rx, scale=0.9)
        rep = greedy_identities_audit(ct_from_dense(x), corr, rx)
        assert rep.ok, rep.failures
        # w~ = 0.9 w on the first step: kappa^2 = 2 / 0.9 - 1
        assert rep.steps[0].kappa == pytest.approx(np.sqrt(2 / 0.9 - 1), rel=1e-10)
        assert all(s.hypothesis_ok for s in rep.steps)

    def test_random_matrix_telescoping(self, rng):
        x = rng.standard_normal((8, 7))
        rx = RankOneMetric.identity((8, 7))
        corr = [ct_from_dense(np.outer(rng.standard_normal(8), rng.standard_normal(7))) for _ in range(5)]
        rep = greedy_identities_audit(x, corr, rx, rtol=1e-10)
        assert all(s.telescoping_residual <= 1e-10 for s in rep.steps)
        assert all(s.energy_residual <= 1e-10 for s in rep.steps)

    def test_failure_named(self, rng):
        x = rng.standard_normal((4, 3))
        rx = RankOneMetric.identity((4, 3))
        # a correction pointing the wrong way gives kappa^2 < 0
        corr = [ct_scale(svd_deflation(x, 1, rx)[0], -1.0)]
        rep = greedy_identities_audit(x, corr, rx)
        assert not rep.ok
        assert "step 1" in rep.failures[0]

    def test_order3_rejected(self, rng):
        with pytest.raises(ValueError):
            greedy_identities_audit(np.zeros(8), [], RankOneMetric.identity((2, 2, 2)))


class TestWeakGreedy:
    def test_rank_one_target(self):
        prob = build_identity_problem((6, 5), rank=1, seed=4)
        delta = 0.05
        sched = GreedySchedule(r_max=3, delta=delta, stop_tol=1e-6)
        cfg = SolverConfig(max_outer=5, lambda_cfg=LambdaConfig(delta=delta, p=3))
        u, diag = weak_greedy_solve(prob, sched, cfg)
        assert u.rank == 1
        assert diag.steps[0].est_err <= 2 * delta * ct_norm(prob.b)
        assert diag.status in ("converged", "exact")

    def test_oracle_run(self, rad6, rad6_oracle):
        sched = GreedySchedule(r_max=6, delta=0.2)
        cfg = SolverConfig(max_outer=4, lambda_cfg=LambdaConfig(p=5))
        u, diag = weak_greedy_solve(rad6, sched, cfg, oracle=rad6_oracle)
        assert u.rank == len(diag.steps) == len(diag.corrections)
        fnorm = rad6_oracle.x_norm(rad6_oracle.u)
        for s in diag.steps:
            assert s.true_alpha <= s.true_alpha_tilde * (1 + 1e-12)
            if (1 + s.gamma) * s.true_alpha < 1:
                assert s.true_err < fnorm
            fnorm = s.true_err
        est = diag.column("est_err")
        slack = (1 + 0.2) / (1 - 0.2)
        assert np.all(est[1:] <= est[:-1] * slack)
        rep = greedy_identities_audit(rad6_oracle.u, diag.corrections, rad6.rx)
        assert rep.ok, rep.failures

    def test_diagnostics_output(self, rad6):
        sched = GreedySchedule(r_max=2, delta=0.3, retry=False)
        cfg = SolverConfig(max_outer=2, lambda_cfg=LambdaConfig(p=3))
        u, diag = weak_greedy_solve(rad6, sched, cfg)
        lines = diag.to_csv(extra={"config_hash": "x"}).strip().splitlines()
        assert lines[0].split(",") == list(DIAG_FIELDS) + ["config_hash"]
        assert len(lines) == 3
        doc = json.loads(diag.to_json())
        assert doc["schedule"]["delta"] == 0.3
        assert len(doc["steps"]) == 2
        assert diag.relative_estimates[-1] < 1.0
