"""Low-rank Kronecker operators and the ideal dual metric.

``LowRankOperator`` represents ``A = sum_i A_i^1 (x) ... (x) A_i^d``.  The
ideal Riesz map of the test space, ``R_Y = A R_X^{-1} A^T``, is wrapped by
:class:`DualMetric`, either implicitly (three applications) or materialized
as an operator with ``r_A**2`` terms when ``R_X`` is diagonal.
"""
from __future__ import annotations

import json
from functools import reduce

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .tensor import (
    CanonicalTensor,
    GuardExceeded,
    RankOneMetric,
    ct_dual_inner,
)

SPARSE_FILL = 0.25
SPECTRAL_GUARD = 20_000


def as_factor(mat):
    """Store ``mat`` sparse (CSR) below 25% fill, dense otherwise."""
    if sp.issparse(mat):
        n = mat.shape[0] * mat.shape[1]
        if n and mat.nnz / n > SPARSE_FILL:
            return np.asarray(mat.toarray(), dtype=float)
        return sp.csr_matrix(mat, dtype=float)
    mat = np.asarray(mat, dtype=float)
    n = mat.size
    if n and np.count_nonzero(mat) / n <= SPARSE_FILL and min(mat.shape) > 8:
        return sp.csr_matrix(mat)
    return mat


def _dense(mat):
    return mat.toarray() if sp.issparse(mat) else np.asarray(mat)


class LowRankOperator:
    """Sum of Kronecker products of per-dimension matrices.

    Parameters
    ----------
    terms : list of list of matrix
        ``terms[i][mu]`` is ``A_i^mu`` of shape ``(row_dims[mu], col_dims[mu])``.
    """

    def __init__(self, terms):
        if not terms:
            raise ValueError("operator needs at least one term")
        d = len(terms[0])
        if d < 2:
            raise ValueError("operator order must be at least 2")
        self.terms = [[as_factor(m) for m in term] for term in terms]
        if any(len(t) != d for t in self.terms):
            raise ValueError("every term needs %d factor matrices" % d)
        self.row_dims = tuple(m.shape[0] for m in self.terms[0])
        self.col_dims = tuple(m.shape[1] for m in self.terms[0])
        for t in self.terms:
            if tuple(m.shape[0] for m in t) != self.row_dims or \
                    tuple(m.shape[1] for m in t) != self.col_dims:
                raise ValueError("inconsistent factor shapes across terms")

    @classmethod
    def identity(cls, dims):
        return cls([[sp.identity(n, format="csr") for n in dims]])

    @property
    def order(self):
        return len(self.row_dims)

    @property
    def rank(self):
        return len(self.terms)

    def factor(self, i, mu):
        return self.terms[i][mu]

    def to_sparse(self):
        """Flattened operator (C ordering), as a CSR matrix."""
        out = None
        for t in self.terms:
            k = reduce(lambda a, b: sp.kron(a, b, format="csr"),
                       [sp.csr_matrix(m) for m in t])
            out = k if out is None else out + k
        return out.tocsr()

    def to_dense(self, guard=SPECTRAL_GUARD):
        n = int(np.prod(self.row_dims)) * int(np.prod(self.col_dims))
        if n > guard**2:
            raise GuardExceeded("dense operator of %d entries exceeds guard" % n)
        return self.to_sparse().toarray()

    def __repr__(self):
        return "LowRankOperator(dims=%s, rank=%d)" % (self.row_dims, self.rank)


def op_apply(a: LowRankOperator, v: CanonicalTensor) -> CanonicalTensor:
    """Exact ``A v``; the result has ``rank(A) * rank(v)`` terms (term-major)."""
    if tuple(v.dims) != a.col_dims:
        raise ValueError("operator columns %s do not match tensor dims %s" % (a.col_dims, v.dims))
    if v.rank == 0:
        return CanonicalTensor.zeros(a.row_dims)
    factors = []
    for mu in range(a.order):
        factors.append(np.hstack([np.asarray(t[mu] @ v.factors[mu]) for t in a.terms]))
    return CanonicalTensor(factors)


def op_adjoint(a: LowRankOperator) -> LowRankOperator:
    """Transpose of every factor (adjoint for the canonical pairing)."""
    return LowRankOperator([[m.T for m in t] for t in a.terms])


def metric_apply(m: RankOneMetric, v: CanonicalTensor) -> CanonicalTensor:
    if v.rank == 0:
        return v
    return CanonicalTensor([m.gram(mu).apply(f) for mu, f in enumerate(v.factors)])


def metric_solve(m: RankOneMetric, v: CanonicalTensor) -> CanonicalTensor:
    """Apply ``R_X^{-1}`` factor by factor; rank is preserved."""
    if m.dims != v.dims:
        raise ValueError("metric dims %s do not match tensor dims %s" % (m.dims, v.dims))
    if v.rank == 0 or m.is_identity():
        return v
    return CanonicalTensor([m.gram(mu).solve(f) for mu, f in enumerate(v.factors)])


class DualMetric:
    """Riesz map ``R_Y = A R_X^{-1} A^T`` of the test space.

    ``mode="auto"`` materializes the ``r_A**2`` term operator when ``R_X``
    is identity or diagonal and the factors are sparse, and stays implicit
    otherwise.
    """

    def __init__(self, a: LowRankOperator, rx: RankOneMetric, mode="auto"):
        if rx.dims != a.col_dims:
            raise ValueError("metric dims %s do not match operator columns %s" % (rx.dims, a.col_dims))
        self.a = a
        self.at = op_adjoint(a)
        self.rx = rx
        if mode == "auto":
            cheap = rx.kind in ("identity", "diagonal-weighted")
            sparse = all(sp.issparse(m) for t in a.terms for m in t)
            mode = "materialized" if cheap and sparse else "implicit"
        if mode not in ("implicit", "materialized"):
            raise ValueError("unknown mode %r" % mode)
        self.mode = mode
        self._pairs = {}
        self._mat = self.materialize() if mode == "materialized" else None

    @property
    def dims(self):
        return self.a.row_dims

    def pair_factor(self, i, j, mu):
        """``A_i^mu G_mu^{-1} (A_j^mu)^T`` (cached; immutable afterwards)."""
        key = (i, j, mu)
        if key not in self._pairs:
            g = self.rx.gram(mu)
            right = g.solve(self.a.terms[j][mu].T)
            prod = self.a.terms[i][mu] @ right
            self._pairs[key] = sp.csr_matrix(prod) if sp.issparse(prod) else np.asarray(prod)
        return self._pairs[key]

    def pair_stack(self, mu):
        """Dense ``(r_A**2, n, n)`` stack of the pair factors of dimension ``mu`` (cached)."""
        key = ("stack", mu)
        if key not in self._pairs:
            r = self.a.rank
            self._pairs[key] = np.array([_dense(self.pair_factor(i, j, mu))
                                         for i in range(r) for j in range(r)])
        return self._pairs[key]

    def materialize(self) -> LowRankOperator:
        terms = []
        for i in range(self.a.rank):
            for j in range(self.a.rank):
                terms.append([self.pair_factor(i, j, mu) for mu in range(self.a.order)])
        return LowRankOperator(terms)

    def adjoint_apply(self, y: CanonicalTensor) -> CanonicalTensor:
        """``A^T y``."""
        return op_apply(self.at, y)

    def inner(self, y: CanonicalTensor, z: CanonicalTensor) -> float:
        """``<y, z>_Y = <A^T y, R_X^{-1} A^T z>``."""
        if y.rank == 0 or z.rank == 0:
            return 0.0
        return ct_dual_inner(self.adjoint_apply(y), self.adjoint_apply(z), self.rx)

    def norm(self, y: CanonicalTensor) -> float:
        val = self.inner(y, y)
        return float(np.sqrt(max(val, 0.0)))

    def to_sparse(self):
        a = self.a.to_sparse()
        rxinv = self.rx.to_sparse()
        rxinv = sp.diags(1.0 / rxinv.diagonal()) if self.rx.kind != "general" else \
            sp.csr_matrix(np.linalg.inv(rxinv.toarray()))
        return (a @ rxinv @ a.T).tocsr()


def dual_apply(ry: DualMetric, y: CanonicalTensor) -> CanonicalTensor:
    """``R_Y y``; exact in both modes (no truncation)."""
    if tuple(y.dims) != ry.dims:
        raise ValueError("tensor dims %s do not match dual metric dims %s" % (y.dims, ry.dims))
    if ry.mode == "materialized":
        return op_apply(ry._mat, y)
    return op_apply(ry.a, metric_solve(ry.rx, ry.adjoint_apply(y)))


def _metric_matrix(m, n):
    if m is None:
        return sp.identity(n, format="csc")
    if isinstance(m, DualMetric):
        return m.to_sparse().tocsc()
    if isinstance(m, RankOneMetric):
        return m.to_sparse().tocsc()
    return sp.csc_matrix(m)


def spectral_bounds(a: LowRankOperator, rx=None, ry=None, iters=300, guard=SPECTRAL_GUARD):
    """Extreme generalized singular values of ``A`` from ``X`` to ``Y'``.

    ``alpha**2`` and ``beta**2`` are the extreme eigenvalues of
    ``A^T R_Y^{-1} A v = lam R_X v``.  ``rx``/``ry`` may be a
    :class:`RankOneMetric`, a :class:`DualMetric`, a matrix, or ``None``
    (identity).  Dense eigensolver below 3000 unknowns, Lanczos above.

    Returns
    -------
    (alpha, beta, kappa)
    """
    n = int(np.prod(a.col_dims))
    if n > guard:
        raise GuardExceeded("spectral_bounds on %d unknowns exceeds guard %d" % (n, guard))
    amat = a.to_sparse().tocsc()
    rxm = _metric_matrix(rx, n)
    rym = _metric_matrix(ry, int(np.prod(a.row_dims)))
    if n <= 3000:
        ryd = rym.toarray()
        ad = amat.toarray()
        k = ad.T @ scipy.linalg.solve(ryd, ad, assume_a="pos")
        k = 0.5 * (k + k.T)
        lam = scipy.linalg.eigvalsh(k, rxm.toarray())
        lo, hi = lam[0], lam[-1]
    else:
        ry_lu = spla.splu(rym)
        rx_lu = spla.splu(rxm)

        def kmv(x):
            return amat.T @ ry_lu.solve(amat @ x)

        kop = spla.LinearOperator((n, n), matvec=kmv, dtype=float)
        hi = spla.eigsh(kop, k=1, M=rxm, Minv=spla.LinearOperator((n, n), matvec=rx_lu.solve),
                        which="LA", maxiter=iters * 10, return_eigenvectors=False)[0]
        a_lu = spla.splu(amat)

        def kinv(x):
            # (A^T R_Y^{-1} A)^{-1} R_X x
            return a_lu.solve(rym @ a_lu.solve(rxm @ x, trans="T"))

        inv_op = spla.LinearOperator((n, n), matvec=kinv, dtype=float)
        # largest eigenvalue of K^{-1} R_X in the R_X geometry = 1 / smallest of K
        mu = spla.eigs(inv_op, k=1, which="LM", maxiter=iters * 10, return_eigenvectors=False)[0]
        lo = 1.0 / float(np.real(mu))
    alpha = float(np.sqrt(max(lo, 0.0)))
    beta = float(np.sqrt(max(hi, 0.0)))
    return alpha, beta, beta / alpha if alpha > 0 else np.inf


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def _factor_doc(m):
    if sp.issparse(m):
        coo = sp.coo_matrix(m)
        return {"layout": "sparse-triplet", "shape": list(coo.shape),
                "row": coo.row.tolist(), "col": coo.col.tolist(), "data": coo.data.tolist()}
    return {"layout": "dense-row-major", "shape": list(m.shape), "data": np.ravel(m).tolist()}


def _factor_from_doc(doc):
    shape = tuple(doc["shape"])
    if doc["layout"] == "sparse-triplet":
        return sp.csr_matrix((doc["data"], (doc["row"], doc["col"])), shape=shape)
    return np.asarray(doc["data"], dtype=float).reshape(shape)


def operator_to_json(a: LowRankOperator) -> str:
    doc = {
        "format": "kronecker-sum",
        "order": a.order,
        "row_dims": list(a.row_dims),
        "col_dims": list(a.col_dims),
        "rank": a.rank,
        "terms": [[_factor_doc(m) for m in t] for t in a.terms],
    }
    return json.dumps(doc)


def operator_from_json(text: str) -> LowRankOperator:
    doc = json.loads(text)
    if doc.get("format") != "kronecker-sum":
        raise ValueError("not a Kronecker-sum operator document")
    return LowRankOperator([[_factor_from_doc(f) for f in t] for t in doc["terms"]])

