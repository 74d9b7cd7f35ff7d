"""Canonical low-rank tensors and rank-one (Kronecker) metrics.

A :class:`CanonicalTensor` stores ``sum_i v_i^1 (x) ... (x) v_i^d`` as one
factor matrix per dimension, column ``i`` of matrix ``mu`` holding
``v_i^mu``.  A :class:`RankOneMetric` is an SPD inner product
``G_1 (x) ... (x) G_d``; all norms and projections accept one.

Dense expansions (:func:`ct_to_dense`) use C ordering, so that the flattened
dense tensor matches ``kron(G_1, ..., G_d)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

DENSE_GUARD = 10**7


class GuardExceeded(RuntimeError):
    """A size guard protecting a dense (oracle) computation was exceeded."""


class CanonicalTensor:
    """Sum of ``rank`` elementary tensors of order ``d``.

    Parameters
    ----------
    factors : sequence of ndarray
        ``factors[mu]`` has shape ``(dims[mu], rank)``.
    dims : sequence of int, optional
        Required only when ``rank == 0`` and ``factors`` is empty.
    """

    __slots__ = ("factors", "dims")

    def __init__(self, factors, dims=None):
        factors = [np.asarray(f, dtype=float) for f in factors]
        if dims is None:
            if not factors:
                raise ValueError("dims required for an empty factor list")
            dims = tuple(f.shape[0] for f in factors)
        dims = tuple(int(n) for n in dims)
        if len(dims) < 2:
            raise ValueError("order must be at least 2, got %d" % len(dims))
        if not factors:
            factors = [np.zeros((n, 0)) for n in dims]
        if len(factors) != len(dims):
            raise ValueError("got %d factors for order %d" % (len(factors), len(dims)))
        ranks = {f.shape[1] for f in factors if f.ndim == 2}
        if any(f.ndim != 2 for f in factors) or len(ranks) != 1:
            raise ValueError("factor matrices must be 2-D with a common column count")
        for f, n in zip(factors, dims):
            if f.shape[0] != n:
                raise ValueError("factor shape %s does not match dim %d" % (f.shape, n))
            if not np.all(np.isfinite(f)):
                raise ValueError("factors contain NaN or Inf")
            f.setflags(write=False)
        self.factors = factors
        self.dims = dims

    @classmethod
    def zeros(cls, dims):
        return cls([], dims=dims)

    @classmethod
    def rank_one(cls, vectors):
        return cls([np.asarray(v, dtype=float).reshape(-1, 1) for v in vectors])

    @property
    def order(self):
        return len(self.dims)

    @property
    def rank(self):
        return self.factors[0].shape[1]

    @property
    def size(self):
        return int(np.prod(self.dims, dtype=float))

    def term(self, i):
        return CanonicalTensor([f[:, i:i + 1] for f in self.factors])

    def __add__(self, other):
        return ct_add(self, other)

    def __sub__(self, other):
        return ct_add(self, ct_scale(other, -1.0))

    def __neg__(self):
        return ct_scale(self, -1.0)

    def __mul__(self, alpha):
        return ct_scale(self, alpha)

    __rmul__ = __mul__

    def __repr__(self):
        return "CanonicalTensor(dims=%s, rank=%d)" % (self.dims, self.rank)


def _check_same_shape(a, b):
    if a.dims != b.dims:
        raise ValueError("dimension mismatch: %s vs %s" % (a.dims, b.dims))


def ct_add(a: CanonicalTensor, b: CanonicalTensor) -> CanonicalTensor:
    """Exact sum by factor concatenation; rank(a) + rank(b) terms."""
    _check_same_shape(a, b)
    if b.rank == 0:
        return a
    if a.rank == 0:
        return b
    return CanonicalTensor([np.hstack((fa, fb)) for fa, fb in zip(a.factors, b.factors)])


def ct_scale(a: CanonicalTensor, alpha: float) -> CanonicalTensor:
    """Scale by ``alpha`` (applied to the first factor only)."""
    if a.rank == 0:
        return a
    return CanonicalTensor([alpha * a.factors[0]] + list(a.factors[1:]))


def ct_sum(tensors: Sequence[CanonicalTensor], coefs=None) -> CanonicalTensor:
    if coefs is None:
        coefs = [1.0] * len(tensors)
    return reduce(ct_add, [ct_scale(t, c) for t, c in zip(tensors, coefs)])


def ct_to_dense(a: CanonicalTensor, guard: int = DENSE_GUARD) -> np.ndarray:
    """Full expansion of ``a`` as an ndarray of shape ``a.dims``."""
    if a.size > guard:
        raise GuardExceeded("dense size %d exceeds guard %d" % (a.size, guard))
    if a.rank == 0:
        return np.zeros(a.dims)
    letters = "abcdefghijklmnopqrstuvwxy"[: a.order]
    expr = ",".join(c + "z" for c in letters) + "->" + letters
    return np.einsum(expr, *a.factors, optimize=True)


def ct_from_dense(x: np.ndarray, tol: float = 0.0) -> CanonicalTensor:
    """Exact canonical representation of an order-2 array via its SVD.

    Singular values below ``tol * s_max`` are dropped.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("ct_from_dense supports order-2 arrays only")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    keep = s > tol * (s[0] if s.size else 0.0)
    keep &= s > 0
    return CanonicalTensor([u[:, keep] * s[keep], vt[keep].T], dims=x.shape)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _Gram:
    """One SPD factor ``G_mu`` with the pieces needed for solves."""

    kind: str  # "identity" | "diagonal" | "general"
    n: int
    diag: np.ndarray | None = None
    matrix: np.ndarray | None = None
    chol: np.ndarray | None = None  # lower triangular, G = L L^T

    def apply(self, x):
        if self.kind == "identity":
            return x
        if self.kind == "diagonal":
            return _diag_mul(self.diag, x)
        return self.matrix @ x

    def solve(self, x):
        if self.kind == "identity":
            return x
        if self.kind == "diagonal":
            return _diag_mul(1.0 / self.diag, x)
        if sp.issparse(x):
            x = x.toarray()
        return scipy.linalg.cho_solve((self.chol, True), x)

    def sqrt_t(self, x):
        """``L^T x`` so that ``||x||_G = ||L^T x||``."""
        if self.kind == "identity":
            return x
        if self.kind == "diagonal":
            return np.sqrt(self.diag)[:, None] * x
        return self.chol.T @ x

    def sqrt_t_solve(self, x):
        """``L^{-T} x`` (inverse of :meth:`sqrt_t`)."""
        if self.kind == "identity":
            return x
        if self.kind == "diagonal":
            return x / np.sqrt(self.diag)[:, None]
        return scipy.linalg.solve_triangular(self.chol.T, x, lower=False)

    def dense(self):
        if self.kind == "identity":
            return np.eye(self.n)
        if self.kind == "diagonal":
            return np.diag(self.diag)
        return self.matrix.copy()


def _diag_mul(d, x):
    if sp.issparse(x):
        return sp.diags(d) @ x
    if x.ndim == 1:
        return d * x
    return d[:, None] * x


class RankOneMetric:
    """SPD Kronecker inner product ``G_1 (x) ... (x) G_d``.

    Build with :meth:`identity`, :meth:`diagonal` or :meth:`general`.
    """

    def __init__(self, grams: Sequence[_Gram]):
        self._grams = tuple(grams)
        self.dims = tuple(g.n for g in self._grams)
        kinds = {g.kind for g in self._grams}
        if kinds == {"identity"}:
            self.kind = "identity"
        elif kinds <= {"identity", "diagonal"}:
            self.kind = "diagonal-weighted"
        else:
            self.kind = "general"

    @classmethod
    def identity(cls, dims):
        return cls([_Gram("identity", int(n)) for n in dims])

    @classmethod
    def diagonal(cls, diags):
        grams = []
        for d in diags:
            if np.isscalar(d) or d is None:
                raise ValueError("diagonal metric needs a vector per dimension")
            d = np.asarray(d, dtype=float)
            if np.any(d <= 0) or not np.all(np.isfinite(d)):
                raise ValueError("diagonal Gram entries must be positive and finite")
            if np.all(d == 1.0):
                grams.append(_Gram("identity", d.size))
            else:
                d = d.copy()
                d.setflags(write=False)
                grams.append(_Gram("diagonal", d.size, diag=d))
        return cls(grams)

    @classmethod
    def general(cls, mats):
        grams = []
        for g in mats:
            g = g.toarray() if sp.issparse(g) else np.asarray(g, dtype=float)
            if g.ndim == 1:
                grams.extend(cls.diagonal([g])._grams)
                continue
            if not np.allclose(g, g.T, rtol=1e-12, atol=1e-14 * np.abs(g).max()):
                raise ValueError("Gram matrix is not symmetric")
            try:
                chol = np.linalg.cholesky(g)
            except np.linalg.LinAlgError as exc:
                raise ValueError("Gram matrix is not positive definite") from exc
            grams.append(_Gram("general", g.shape[0], matrix=g, chol=chol))
        return cls(grams)

    @property
    def order(self):
        return len(self._grams)

    def gram(self, mu) -> _Gram:
        return self._grams[mu]

    def is_identity(self):
        return self.kind == "identity"

    def to_dense(self, guard: int = 20_000):
        n = int(np.prod(self.dims))
        if n > guard:
            raise GuardExceeded("metric of size %d exceeds guard %d" % (n, guard))
        return reduce(np.kron, [g.dense() for g in self._grams])

    def to_sparse(self):
        mats = []
        for g in self._grams:
            if g.kind == "identity":
                mats.append(sp.identity(g.n, format="csr"))
            elif g.kind == "diagonal":
                mats.append(sp.diags(g.diag, format="csr"))
            else:
                mats.append(sp.csr_matrix(g.matrix))
        return reduce(lambda a, b: sp.kron(a, b, format="csr"), mats)

    def __repr__(self):
        return "RankOneMetric(dims=%s, kind=%r)" % (self.dims, self.kind)


def _check_metric(a: CanonicalTensor, m: RankOneMetric):
    if m.dims != a.dims:
        raise ValueError("metric dims %s do not match tensor dims %s" % (m.dims, a.dims))


def _factor_grams(a, b, m, inverse=False):
    """Per-dimension ``A_mu^T G_mu^{(-1)} B_mu`` (rank_a x rank_b)."""
    out = []
    for mu in range(a.order):
        fa, fb = a.factors[mu], b.factors[mu]
        if m is None:
            out.append(fa.T @ fb)
        else:
            g = m.gram(mu)
            out.append(fa.T @ (g.solve(fb) if inverse else g.apply(fb)))
    return out


def ct_inner(a: CanonicalTensor, b: CanonicalTensor, m: RankOneMetric | None = None) -> float:
    """Induced inner product ``sum_ij prod_mu a_i^T G_mu b_j``.

    ``m=None`` means the canonical (identity) inner product.
    """
    _check_same_shape(a, b)
    if m is not None:
        _check_metric(a, m)
    if a.rank == 0 or b.rank == 0:
        return 0.0
    prod = reduce(np.multiply, _factor_grams(a, b, m))
    return float(prod.sum())


def ct_dual_inner(a: CanonicalTensor, b: CanonicalTensor, m: RankOneMetric) -> float:
    """Inner product with the inverse metric, ``<a, G^{-1} b>``."""
    _check_same_shape(a, b)
    _check_metric(a, m)
    if a.rank == 0 or b.rank == 0:
        return 0.0
    prod = reduce(np.multiply, _factor_grams(a, b, m, inverse=True))
    return float(prod.sum())


def _safe_sqrt(val, scale):
    if val < 0:
        if val < -1e-10 * max(scale, 1e-300):
            raise ValueError("negative squared norm %.3e: metric is not SPD" % val)
        return 0.0
    return float(np.sqrt(val))


def ct_norm(a: CanonicalTensor, m: RankOneMetric | None = None) -> float:
    """``sqrt(ct_inner(a, a, m))``."""
    if a.rank == 0:
        return 0.0
    grams = _factor_grams(a, a, m)
    prod = reduce(np.multiply, grams)
    scale = float(np.abs(prod).sum())
    return _safe_sqrt(float(prod.sum()), scale)


def ct_dual_norm(a: CanonicalTensor, m: RankOneMetric) -> float:
    if a.rank == 0:
        return 0.0
    prod = reduce(np.multiply, _factor_grams(a, a, m, inverse=True))
    return _safe_sqrt(float(prod.sum()), float(np.abs(prod).sum()))


# --------------------------------------------------------------------------
# order-2 best approximation
# --------------------------------------------------------------------------

def _fix_signs(u, vt):
    """Make the largest-magnitude entry of each left vector positive."""
    if u.shape[1] == 0:
        return u, vt
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def weighted_svd(a: CanonicalTensor, m: RankOneMetric | None = None):
    """SVD of an order-2 tensor in the geometry of ``m``.

    Returns ``(U, s, V)`` with columns of ``U`` (resp. ``V``) orthonormal
    in ``G_1`` (resp. ``G_2``) and ``a = U diag(s) V^T``.  Works from the
    factors only; the dense matrix is never formed.
    """
    if a.order != 2:
        raise ValueError("weighted_svd requires an order-2 tensor, got order %d" % a.order)
    if m is None:
        m = RankOneMetric.identity(a.dims)
    _check_metric(a, m)
    g1, g2 = m.gram(0), m.gram(1)
    if a.rank == 0:
        return np.zeros((a.dims[0], 0)), np.zeros(0), np.zeros((a.dims[1], 0))
    x1 = g1.sqrt_t(a.factors[0])
    x2 = g2.sqrt_t(a.factors[1])
    q1, r1 = np.linalg.qr(x1)
    q2, r2 = np.linalg.qr(x2)
    uc, s, vct = np.linalg.svd(r1 @ r2.T, full_matrices=False)
    ut = q1 @ uc
    vt = (q2 @ vct.T).T
    ut, vt = _fix_signs(ut, vt)
    u = g1.sqrt_t_solve(ut)
    v = g2.sqrt_t_solve(vt.T)
    return u, s, v


def svd2d_project(a: CanonicalTensor, r: int, m: RankOneMetric | None = None) -> CanonicalTensor:
    """Best rank-``r`` approximation of an order-2 tensor in the norm of ``m``.

    The singular values are folded into the first factor.  ``r`` larger
    than the available rank is clamped.
    """
    if a.order != 2:
        raise ValueError("svd2d_project requires an order-2 tensor, got order %d" % a.order)
    if r < 0:
        raise ValueError("rank must be non-negative")
    u, s, v = weighted_svd(a, m)
    r = min(r, s.size, *a.dims)
    keep = np.flatnonzero(s[:r] > 0)
    return CanonicalTensor([u[:, keep] * s[keep], v[:, keep]], dims=a.dims)


@dataclass(frozen=True)
class FormatSpec:
    """Target low-rank subset: canonical tensors of rank ``target_rank``."""

    target_rank: int
    projector_kind: str = "svd2d"
    family: str = "canonical"

    def __post_init__(self):
        if self.family != "canonical":
            raise ValueError("only the canonical family is supported")
        if self.projector_kind not in ("svd2d", "als", "greedy-rank-one"):
            raise ValueError("unknown projector kind %r" % self.projector_kind)
        if self.target_rank < 1:
            raise ValueError("target_rank must be >= 1")
        if self.projector_kind == "greedy-rank-one" and self.target_rank != 1:
            raise ValueError("greedy-rank-one projector requires target_rank 1")

    def check_order(self, order):
        if self.projector_kind == "svd2d" and order != 2:
            raise ValueError("svd2d projector is only legal for order-2 tensors")


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def tensor_to_json(a: CanonicalTensor) -> str:
    """Self-describing JSON; floats use ``repr`` so the round trip is exact."""
    doc = {
        "format": "canonical",
        "order": a.order,
        "dims": list(a.dims),
        "rank": a.rank,
        "layout": "row-major",
        "factors": [f.tolist() for f in a.factors],
    }
    return json.dumps(doc)


def tensor_from_json(text: str) -> CanonicalTensor:
    doc = json.loads(text)
    if doc.get("format") != "canonical":
        raise ValueError("not a canonical tensor document")
    dims = doc["dims"]
    rank = doc["rank"]
    factors = [np.asarray(f, dtype=float).reshape(n, rank) for f, n in zip(doc["factors"], dims)]
    if len(dims) != doc["order"]:
        raise ValueError("order does not match dims")
    return CanonicalTensor(factors, dims=dims)


def save_tensor(path, a: CanonicalTensor):
    with open(path, "w") as fh:
        fh.write(tensor_to_json(a))


def load_tensor(path) -> CanonicalTensor:
    with open(path) as fh:
        return tensor_from_json(fh.read())
