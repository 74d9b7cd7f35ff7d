"""Kronecker-sum operators, the ideal dual metric and spectral diagnostics."""
from functools import reduce

import numpy as np
import pytest
import scipy.sparse as sp

from aimr.operators import (
    DualMetric,
    LowRankOperator,
    dual_apply,
    metric_apply,
    metric_solve,
    op_adjoint,
    op_apply,
    operator_from_json,
    operator_to_json,
    spectral_bounds,
)
from aimr.tensor import CanonicalTensor, GuardExceeded, RankOneMetric, ct_add, ct_inner, ct_to_dense

from conftest import random_ct


def random_op(rng, dims, rank, spd=False):
    terms = []
    for _ in range(rank):
        t = []
        for n in dims:
            m = rng.standard_normal((n, n))
            t.append(m @ m.T + n * np.eye(n) if spd else m)
        terms.append(t)
    return LowRankOperator(terms)


def dense_op(a):
    return sum(reduce(np.kron, [sp.csr_matrix(m).toarray() for m in t]) for t in a.terms)


class TestApply:
    def test_identity(self, rng):
        v = random_ct(rng, (4, 3), 2)
        w = op_apply(LowRankOperator.identity(v.dims), v)
        np.testing.assert_array_equal(ct_to_dense(w), ct_to_dense(v))

    def test_rank3_operator_on_rank_one(self, rad6):
        v = CanonicalTensor.rank_one([np.ones(n) for n in rad6.dims])
        assert rad6.a.rank == 3
        assert op_apply(rad6.a, v).rank == 3

    def test_matches_dense_kronecker(self, rng):
        a = random_op(rng, (4, 3, 2), 2)
        v = random_ct(rng, (4, 3, 2), 2)
        av = op_apply(a, v)
        assert av.rank == 4
        np.testing.assert_allclose(ct_to_dense(av).ravel(), dense_op(a) @ ct_to_dense(v).ravel(),
                                   rtol=1e-12, atol=1e-12)

    def test_linear(self, rng):
        a = random_op(rng, (4, 3), 2)
        v, w = random_ct(rng, (4, 3), 2), random_ct(rng, (4, 3), 1)
        lhs = ct_to_dense(op_apply(a, ct_add(v, w)))
        rhs = ct_to_dense(op_apply(a, v)) + ct_to_dense(op_apply(a, w))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            op_apply(random_op(rng, (4, 3), 1), random_ct(rng, (3, 4), 1))

    def test_inconsistent_terms_rejected(self):
        with pytest.raises(ValueError):
            LowRankOperator([[np.eye(2), np.eye(3)], [np.eye(2), np.eye(2)]])


class TestAdjoint:
    def test_identity(self):
        a = op_adjoint(LowRankOperator.identity((3, 2)))
        np.testing.assert_array_equal(dense_op(a), np.eye(6))

    def test_double_adjoint(self, rng):
        a = random_op(rng, (3, 4), 2)
        aa = op_adjoint(op_adjoint(a))
        for t, s in zip(a.terms, aa.terms):
            for m1, m2 in zip(t, s):
                np.testing.assert_array_equal(m1, m2)

    def test_duality(self, rng):
        a = random_op(rng, (4, 3, 2), 2)
        v, w = random_ct(rng, (4, 3, 2), 1), random_ct(rng, (4, 3, 2), 1)
        lhs = ct_inner(op_apply(a, v), w)
        rhs = ct_inner(v, op_apply(op_adjoint(a), w))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestMetricSolve:
    def test_identity(self, rng):
        v = random_ct(rng, (4, 3), 2)
        assert metric_solve(RankOneMetric.identity(v.dims), v) is v

    def test_diagonal(self, rng):
        w = rng.uniform(1.0, 5.0, 4)
        m = RankOneMetric.diagonal([w**2, np.ones(3)])
        v = random_ct(rng, (4, 3), 2)
        s = metric_solve(m, v)
        np.testing.assert_allclose(s.factors[0], v.factors[0] / (w**2)[:, None], rtol=1e-15)

    def test_general_roundtrip(self, rad6, rng):
        m = RankOneMetric.general([rad6.a.terms[0][0], np.eye(rad6.dims[1])])
        v = random_ct(rng, rad6.dims, 3)
        back = metric_apply(m, metric_solve(m, v))
        np.testing.assert_allclose(ct_to_dense(back), ct_to_dense(v), rtol=1e-11, atol=1e-11)


class TestDualMetric:
    def test_identity_pair(self, rng):
        y = random_ct(rng, (4, 3), 2)
        ry = DualMetric(LowRankOperator.identity((4, 3)), RankOneMetric.identity((4, 3)))
        np.testing.assert_allclose(ct_to_dense(dual_apply(ry, y)), ct_to_dense(y), rtol=1e-15)

    def test_modes_agree(self, rad6, rng):
        imp = DualMetric(rad6.a, rad6.rx, mode="implicit")
        mat = DualMetric(rad6.a, rad6.rx, mode="materialized")
        assert mat._mat.rank == 9
        y = random_ct(rng, rad6.dims, 2)
        a, b = ct_to_dense(dual_apply(imp, y)), ct_to_dense(dual_apply(mat, y))
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-11 * np.abs(a).max())

    def test_auto_mode(self, rad10, rad6):
        # sparse factors and a diagonal metric: materialized
        assert DualMetric(rad10.a, rad10.rx).mode == "materialized"
        # dense stochastic factors (small degree) or a general metric: implicit
        assert DualMetric(rad6.a, rad6.rx).mode == "implicit"
        gen = RankOneMetric.general([np.eye(n) + 0.1 * np.ones((n, n)) for n in rad10.dims])
        assert DualMetric(rad10.a, gen).mode == "implicit"

    def test_symmetric(self, rad6, rng):
        ry = DualMetric(rad6.a, rad6.rx)
        y, z = random_ct(rng, rad6.dims, 2), random_ct(rng, rad6.dims, 2)
        lhs = ct_inner(dual_apply(ry, y), z)
        rhs = ct_inner(y, dual_apply(ry, z))
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_positivity_identity(self, rad6, rng):
        ry = DualMetric(rad6.a, rad6.rx)
        for _ in range(100):
            y = random_ct(rng, rad6.dims, 1)
            val = ct_inner(dual_apply(ry, y), y)
            aty = ct_to_dense(ry.adjoint_apply(y)).ravel()
            assert val > 0
            assert val == pytest.approx(aty @ aty, rel=1e-10)

    def test_weighted_metric_matches_dense(self, rad6, rng):
        from aimr.problems import build_weighted_metric
        rx = build_weighted_metric(rad6, weight=10.0)
        ry = DualMetric(rad6.a, rx)
        amat = rad6.a.to_sparse().toarray()
        dense_ry = amat @ np.linalg.inv(rx.to_dense()) @ amat.T
        y = random_ct(rng, rad6.dims, 2)
        np.testing.assert_allclose(ct_to_dense(dual_apply(ry, y)).ravel(), dense_ry @ ct_to_dense(y).ravel(),
                                   rtol=1e-10, atol=1e-10 * np.abs(dense_ry).max())

    def test_ideal_metric_identity(self, rad6, rad6_oracle, rng):
        ry = DualMetric(rad6.a, rad6.rx)
        for _ in range(10):
            v = random_ct(rng, rad6.dims, 2)
            nx = rad6_oracle.x_norm(v)
            assert rad6_oracle.dual_norm(op_apply(rad6.a, v)) == pytest.approx(nx, rel=1e-8)
            assert ry.norm(v) >= 0


class TestSpectralBounds:
    def test_ideal_pair(self, rad6):
        ry = DualMetric(rad6.a, rad6.rx)
        alpha, beta, kappa = spectral_bounds(rad6.a, rad6.rx, ry)
        assert alpha == pytest.approx(1.0, abs=1e-8)
        assert beta == pytest.approx(1.0, abs=1e-8)
        assert kappa == pytest.approx(1.0, abs=1e-8)

    def test_identity_everything(self):
        alpha, beta, kappa = spectral_bounds(LowRankOperator.identity((3, 4)))
        assert (alpha, beta, kappa) == pytest.approx((1.0, 1.0, 1.0), abs=1e-12)

    def test_canonical_geometry_is_ill_conditioned(self, rad6):
        alpha, beta, kappa = spectral_bounds(rad6.a)
        amat = rad6.a.to_sparse().toarray()
        s = np.linalg.svd(amat, compute_uv=False)
        assert kappa == pytest.approx(s[0] / s[-1], rel=1e-8)
        assert kappa > 1.0

    def test_guard(self, rad6):
        with pytest.raises(GuardExceeded):
            spectral_bounds(rad6.a, guard=10)


def test_operator_json_roundtrip(rad6, rng):
    b = operator_from_json(operator_to_json(rad6.a))
    v = random_ct(rng, rad6.dims, 2)
    np.testing.assert_array_equal(ct_to_dense(op_apply(b, v)), ct_to_dense(op_apply(rad6.a, v)))


def test_sparse_storage_heuristic():
    from aimr.operators import as_factor
    assert sp.issparse(as_factor(np.eye(20)))
    assert not sp.issparse(as_factor(np.ones((20, 20))))
    assert not sp.issparse(as_factor(sp.csr_matrix(np.ones((4, 4)))))
