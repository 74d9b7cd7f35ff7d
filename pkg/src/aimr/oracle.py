"""Dense (flattened) reference computations for guard-sized problems.

Everything here works on the flattened C-ordered vectors and factorized
sparse matrices; nothing goes through the low-rank machinery except the
final conversion back to canonical tensors.  Used by the ideal reference
solver, the greedy audits and the tests.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operators import DualMetric
from .tensor import CanonicalTensor, GuardExceeded, ct_from_dense, ct_to_dense, svd2d_project

ORACLE_GUARD = 200_000


def _flat(v, dims):
    if isinstance(v, CanonicalTensor):
        if tuple(v.dims) != tuple(dims):
            raise ValueError("tensor dims %s do not match %s" % (v.dims, dims))
        return ct_to_dense(v).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if v.size != int(np.prod(dims)):
        raise ValueError("vector of size %d does not match dims %s" % (v.size, dims))
    return v


class DenseOracle:
    """Exact solution, residuals and norms of ``problem`` by sparse LU.

    Parameters
    ----------
    problem : Problem
        Any object with ``a``, ``b`` and ``rx``.
    check : float
        Bound on the relative 2-norm residual of the direct solve.
    """

    def __init__(self, problem, guard=ORACLE_GUARD, check=1e-10):
        dims = tuple(problem.b.dims)
        n = int(np.prod(dims))
        if n > guard:
            raise GuardExceeded("%d unknowns exceed the oracle guard %d" % (n, guard))
        self.problem = problem
        self.dims = dims
        self.amat = problem.a.to_sparse().tocsc()
        self.rxmat = problem.rx.to_sparse().tocsc()
        self._lu = spla.splu(self.amat)
        self._lut = spla.splu(self.amat.T.tocsc())
        self._rx_lu = spla.splu(self.rxmat)
        self.b = _flat(problem.b, dims)
        self.u = self._lu.solve(self.b)
        res = np.linalg.norm(self.amat @ self.u - self.b) / max(np.linalg.norm(self.b), 1e-300)
        if res > check:
            raise ArithmeticError("direct solve residual %.3e exceeds %.1e" % (res, check))
        self._ry = None
        self._ry_lu = None
        self._u_ct = None

    # norms ----------------------------------------------------------------

    def x_inner(self, v, w):
        return float(_flat(v, self.dims) @ (self.rxmat @ _flat(w, self.dims)))

    def x_norm(self, v):
        return float(np.sqrt(max(self.x_inner(v, v), 0.0)))

    @property
    def ry_matrix(self):
        """Flattened ``R_Y = A R_X^{-1} A^T`` assembled from the pair factors."""
        if self._ry is None:
            ry = DualMetric(self.problem.a, self.problem.rx, mode="materialized")
            self._ry = ry._mat.to_sparse().tocsc()
        return self._ry

    def y_inner(self, y, z):
        return float(_flat(y, self.dims) @ (self.ry_matrix @ _flat(z, self.dims)))

    def y_norm(self, y):
        return float(np.sqrt(max(self.y_inner(y, y), 0.0)))

    def riesz(self, g):
        """Flat ``R_Y^{-1} g`` through a sparse LU of ``R_Y``."""
        if self._ry_lu is None:
            self._ry_lu = spla.splu(self.ry_matrix)
        return self._ry_lu.solve(_flat(g, self.dims))

    def dual_norm(self, g):
        """``||g||_{Y'} = sqrt(g^T R_Y^{-1} g)`` with an independent factorization of ``R_Y``."""
        g = _flat(g, self.dims)
        return float(np.sqrt(max(g @ self.riesz(g), 0.0)))

    # solution -------------------------------------------------------------

    def solution(self) -> CanonicalTensor:
        if self._u_ct is None:
            if len(self.dims) != 2:
                raise ValueError("canonical form of the oracle solution needs order 2")
            self._u_ct = ct_from_dense(self.u.reshape(self.dims))
        return self._u_ct

    def error(self, v):
        """``||u - v||_X``."""
        return self.x_norm(self.u - _flat(v, self.dims))

    def best_approximation(self, rank) -> CanonicalTensor:
        """``Pi_{R_r}(u)`` in the X-norm (order 2)."""
        return svd2d_project(self.solution(), rank, self.problem.rx)

    def best_error(self, rank):
        return self.error(self.best_approximation(rank))

    # residuals ------------------------------------------------------------

    def residual(self, v) -> np.ndarray:
        """Exact ``r = R_Y^{-1}(A v - b) = A^{-T} R_X (v - u)`` (flat)."""
        diff = _flat(v, self.dims) - self.u
        return self._lut.solve(self.rxmat @ diff)

    def truncated_residual(self, v, delta, rng):
        """Flat ``y`` with ``||y - r||_Y = delta ||r||_Y`` exactly.

        ``y`` is the Y-orthogonal projection of ``r`` onto a hyperplane, so
        ``<y - r, y>_Y = 0`` and ``||y||_Y = sqrt(1 - delta**2) ||r||_Y``.
        ``delta = 0`` returns ``r``.
        """
        if not 0.0 <= delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        r = self.residual(v)
        nr = self.y_norm(r)
        if delta == 0.0 or nr == 0.0:
            return r
        rhat = r / nr
        z = rng.standard_normal(r.size)
        z -= self.y_inner(z, rhat) * rhat
        z /= self.y_norm(z)
        q = delta * rhat + np.sqrt(1.0 - delta**2) * z
        return r - delta * nr * q

    def to_tensor(self, flat) -> CanonicalTensor:
        if len(self.dims) != 2:
            raise ValueError("order-2 oracle only")
        return ct_from_dense(np.asarray(flat).reshape(self.dims))


def dense_weighted_svd(x, g1, g2):
    """Brute-force weighted SVD through dense matrix square roots.

    Returns ``(U, s, V)`` with ``U^T G1 U = I``, ``V^T G2 V = I`` and
    ``x = U diag(s) V^T``.  Independent of the factor-based implementation.
    """
    def sqrtm(g):
        w, q = np.linalg.eigh(np.asarray(g, dtype=float))
        return (q * np.sqrt(w)) @ q.T, (q / np.sqrt(w)) @ q.T

    h1, h1i = sqrtm(g1.toarray() if sp.issparse(g1) else g1)
    h2, h2i = sqrtm(g2.toarray() if sp.issparse(g2) else g2)
    uu, s, vt = np.linalg.svd(h1 @ x @ h2, full_matrices=False)
    return h1i @ uu, s, h2i @ vt.T
