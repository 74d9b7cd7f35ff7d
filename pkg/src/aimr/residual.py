"""Low-rank approximation of the dual residual ``r = R_Y^{-1} g``.

The target ``r`` is never formed.  Every quantity is evaluated through the
pairing ``<r, y>_Y = <g, y>``, so the objective minimized by all steps is

    J(y) = <R_Y y, y> - 2 <g, y> = ||y - r||_Y^2 - ||r||_Y^2.

:func:`lambda_delta` builds ``y_m`` by greedy rank-one corrections
(:func:`rank_one_correction`), each followed by projections onto the span of
the current factors of one dimension (:func:`dimension_update`), and stops
on the stagnation test ``||y_m - y_{m+p}||_Y <= delta ||y_{m+p}||_Y``.
"""
from __future__ import annotations

import collections
import dataclasses
import logging
from dataclasses import dataclass, field
from functools import reduce

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operators import DualMetric
from .tensor import CanonicalTensor, ct_add, ct_inner, ct_norm, ct_scale

logger = logging.getLogger(__name__)

DENSE_SOLVE_MAX = 1500
DENSE_STACK_MAX = 2000  # largest n_mu whose pair factors are kept dense


@dataclass
class ALSConfig:
    max_sweeps: int = 30
    stagnation_tol: float = 1e-6
    seed: int = 0


@dataclass
class LambdaConfig:
    """Controls of the residual approximation.

    ``update_dims=None`` visits every dimension whose update system stays
    below ``solve_guard`` unknowns.  An empty tuple disables updates.
    """

    delta: float = 0.2
    p: int = 20
    max_rank: int = 100
    update_dims: tuple | None = None
    update_passes: int = 1
    solve_guard: int = 20_000
    als: ALSConfig = field(default_factory=ALSConfig)

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1), got %r" % self.delta)
        if self.p < 1:
            raise ValueError("stagnation lag p must be >= 1")
        if self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")
        if isinstance(self.als, dict):
            self.als = ALSConfig(**self.als)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


class ResidualProblem:
    """Residual functional ``g`` (typically ``A u - b``) paired with ``R_Y``."""

    def __init__(self, a, ry: DualMetric, rhs: CanonicalTensor):
        if tuple(rhs.dims) != ry.dims:
            raise ValueError("rhs dims %s do not match dual metric dims %s" % (rhs.dims, ry.dims))
        self.a = a
        self.ry = ry
        self.rhs = rhs
        self._rhs_dual_norm = None

    @property
    def dims(self):
        return self.ry.dims

    @property
    def order(self):
        return len(self.ry.dims)

    @property
    def rhs_dual_norm_est(self):
        """``||g||_2``; a cheap scale for the functional (not ``||r||_Y``)."""
        if self._rhs_dual_norm is None:
            self._rhs_dual_norm = ct_norm(self.rhs)
        return self._rhs_dual_norm

    def objective(self, y: CanonicalTensor) -> float:
        """``||y - r||_Y^2 - ||r||_Y^2``."""
        if y.rank == 0:
            return 0.0
        return self.ry.inner(y, y) - 2.0 * ct_inner(self.rhs, y)


@dataclass
class LambdaReport:
    delta: float
    p: int
    rank: int = 0
    n_corrections: int = 0
    objective_history: list = field(default_factory=list)
    e_history: list = field(default_factory=list)
    stagnation_estimate: float = np.inf
    precision_reached: bool = False
    certified: bool = False
    ynorm: float = 0.0
    seed: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "delta": self.delta,
            "p": self.p,
            "rank": self.rank,
            "n_corrections": self.n_corrections,
            "objective_history": list(self.objective_history),
            "e_history": list(self.e_history),
            "stagnation_estimate": self.stagnation_estimate,
            "precision_reached": self.precision_reached,
            "certified": self.certified,
            "ynorm": self.ynorm,
            "seed": self.seed,
            "flags": list(self.flags),
        }


# --------------------------------------------------------------------------
# reduced systems
# --------------------------------------------------------------------------

def _side_grams(ry: DualMetric, factors, mu):
    """``C[i, j] = (A_i^T W)^T G^{-1} (A_j^T W)`` for dimension ``mu``.

    Returns an array of shape ``(r_A, r_A, m, m)``.
    """
    s = [np.asarray(t[mu] @ factors) for t in ry.at.terms]
    g = ry.rx.gram(mu)
    gs = [g.solve(x) for x in s]
    return np.array([[si.T @ gj for gj in gs] for si in s])


def _coupling(side, mu):
    """Hadamard product of the side Grams of every dimension except ``mu``."""
    others = [c for nu, c in enumerate(side) if nu != mu]
    return reduce(np.multiply, others)


def _reduced_matrix(ry: DualMetric, coef, mu):
    """``sum_ij kron(coef[i, j], A_i G^{-1} A_j^T)`` on dimension ``mu``."""
    r_a = coef.shape[0]
    m = coef.shape[2]
    n = ry.dims[mu]
    if n <= DENSE_STACK_MAX and m * n <= 2 * DENSE_SOLVE_MAX:
        stack = ry.pair_stack(mu)
        out = np.einsum("kab,kij->aibj", coef.reshape(r_a * r_a, m, m), stack, optimize=True)
        return out.reshape(m * n, m * n)
    out = None
    for i in range(r_a):
        for j in range(r_a):
            b = ry.pair_factor(i, j, mu)
            if m == 1:
                blk = coef[i, j, 0, 0] * b
            elif sp.issparse(b):
                blk = sp.kron(coef[i, j], b, format="csr")
            else:
                blk = np.kron(coef[i, j], b)
            out = blk if out is None else out + blk
    return out


def _spd_solve(mat, rhs):
    """Solve an SPD reduced system; one jitter retry on failure.

    Returns ``(x, jittered)``.
    """
    n = mat.shape[0]
    dense = not sp.issparse(mat) or n <= DENSE_SOLVE_MAX
    if dense:
        # cho_factor reads the upper triangle only, so no explicit symmetrization
        mat = mat.toarray() if sp.issparse(mat) else np.asarray(mat)
    for attempt in range(2):
        try:
            if dense:
                c = scipy.linalg.cho_factor(mat, lower=False, check_finite=False)
                x = scipy.linalg.cho_solve(c, rhs, check_finite=False)
            else:
                x = spla.splu(sp.csc_matrix(mat)).solve(rhs)
            if np.all(np.isfinite(x)):
                return x, attempt > 0
        except (np.linalg.LinAlgError, RuntimeError, ValueError):
            pass
        diag = mat.diagonal()
        jitter = 1e-12 * float(np.sum(np.abs(diag))) / n
        if jitter == 0.0:
            jitter = 1e-300
        mat = mat + jitter * (np.eye(n) if dense else sp.identity(n, format="csr"))
    raise np.linalg.LinAlgError("reduced system is singular even after jitter")


class _Functional:
    """Linear form ``<g, .> - <R_Y y0, .>`` evaluated on elementary tensors."""

    def __init__(self, g: CanonicalTensor, ry: DualMetric, y0: CanonicalTensor | None = None):
        self.g = g
        self.ry = ry
        self.q = None
        if y0 is not None and y0.rank > 0:
            from .operators import metric_solve
            self.q = metric_solve(ry.rx, ry.adjoint_apply(y0))

    def is_zero(self):
        return self.g.rank == 0 and self.q is None

    def partial(self, factors, mu):
        """Gradient block on dimension ``mu`` for columns ``factors``; (n_mu, m)."""
        d = len(factors)
        m = factors[0].shape[1]
        out = np.zeros((self.ry.dims[mu], m))
        if self.g.rank:
            coef = np.ones((self.g.rank, m))
            for nu in range(d):
                if nu != mu:
                    coef *= self.g.factors[nu].T @ factors[nu]
            out += self.g.factors[mu] @ coef
        if self.q is not None:
            for t, tt in zip(self.ry.a.terms, self.ry.at.terms):
                coef = np.ones((self.q.rank, m))
                for nu in range(d):
                    if nu != mu:
                        coef *= self.q.factors[nu].T @ np.asarray(tt[nu] @ factors[nu])
                out -= np.asarray(t[mu] @ (self.q.factors[mu] @ coef))
        return out


# --------------------------------------------------------------------------
# greedy steps
# --------------------------------------------------------------------------

def _random_unit_factors(dims, rng):
    out = []
    for n in dims:
        v = rng.standard_normal(n)
        out.append((v / np.linalg.norm(v)).reshape(-1, 1))
    return out


def rank_one_correction(rp: ResidualProblem, y_current: CanonicalTensor | None = None,
                        als: ALSConfig | None = None, rng=None, report=None) -> CanonicalTensor:
    """Rank-one ``w`` approximately minimizing ``||y_current + w - r||_Y``.

    Alternating minimization over the factors of ``w``; each half-step
    solves the SPD system of one dimension exactly, so the objective never
    increases.  Returns the zero tensor (rank 0) when the target vanishes.
    """
    als = als or ALSConfig()
    if rng is None:
        rng = np.random.default_rng(als.seed)
    if y_current is None:
        y_current = CanonicalTensor.zeros(rp.dims)
    lin = _Functional(rp.rhs, rp.ry, y_current)
    if lin.is_zero():
        return CanonicalTensor.zeros(rp.dims)
    d = rp.order
    w = _random_unit_factors(rp.dims, rng)
    side = [_side_grams(rp.ry, w[mu], mu) for mu in range(d)]
    for sweep in range(als.max_sweeps):
        prev = CanonicalTensor(w)
        for mu in range(d):
            for nu in range(d):
                if nu == mu:
                    continue
                s = np.linalg.norm(w[nu])
                if s == 0.0:
                    return CanonicalTensor.zeros(rp.dims)
                w[nu] = w[nu] / s
                side[nu] = side[nu] / s**2
            coef = _coupling(side, mu)
            mat = _reduced_matrix(rp.ry, coef, mu)
            rhs = lin.partial(w, mu)[:, 0]
            x, jit = _spd_solve(mat, rhs)
            if jit and report is not None:
                report.flags.append("jitter")
            w[mu] = x.reshape(-1, 1)
            side[mu] = _side_grams(rp.ry, w[mu], mu)
        cur = CanonicalTensor(w)
        scale = ct_norm(cur)
        if scale == 0.0:
            return CanonicalTensor.zeros(rp.dims)
        change = ct_norm(ct_add(cur, ct_scale(prev, -1.0))) / scale
        if change < als.stagnation_tol:
            break
    return CanonicalTensor(w)


def dimension_update(rp: ResidualProblem, y: CanonicalTensor, mu: int,
                     solve_guard: int = 20_000, report=None) -> CanonicalTensor:
    """Replace all ``mu``-factors of ``y`` by the Y-projection of ``r``.

    Solves the ``m * n_mu`` SPD system of the subspace spanned by varying
    the ``mu``-factors; skipped (with a warning) above ``solve_guard``.
    """
    m = y.rank
    if m == 0:
        return y
    n = rp.dims[mu]
    if m * n > solve_guard:
        logger.warning("dimension update on dim %d skipped: %d unknowns exceed guard %d",
                       mu, m * n, solve_guard)
        if report is not None:
            report.flags.append("update-skipped-dim-%d" % mu)
        return y
    factors = list(y.factors)
    side = [None if nu == mu else _side_grams(rp.ry, factors[nu], nu) for nu in range(rp.order)]
    coef = _coupling(side, mu)
    mat = _reduced_matrix(rp.ry, coef, mu)
    rhs = _Functional(rp.rhs, rp.ry).partial(factors, mu).ravel(order="F")
    x, jit = _spd_solve(mat, rhs)
    if jit and report is not None:
        report.flags.append("jitter")
    factors[mu] = x.reshape((n, m), order="F")
    return CanonicalTensor(factors)


def stagnation_estimate(history, ry: DualMetric, p: int | None = None) -> float:
    """``||y_m - y_{m+p}||_Y / ||y_{m+p}||_Y`` for ``history = [..., y_m, ..., y_{m+p}]``.

    With ``p=None`` the first and last entries are compared.  Returns
    ``inf`` when only the denominator vanishes and 0 when both do.
    """
    if p is None:
        first, last = history[0], history[-1]
    else:
        if len(history) < p + 1:
            raise ValueError("history holds %d iterates, need %d" % (len(history), p + 1))
        first, last = history[-p - 1], history[-1]
    num = ry.norm(ct_add(first, ct_scale(last, -1.0)))
    den = ry.norm(last)
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


def _auto_update_dims(cfg: LambdaConfig, dims, m):
    if cfg.update_dims is not None:
        return tuple(cfg.update_dims)
    return tuple(mu for mu, n in enumerate(dims) if n * m <= cfg.solve_guard)


def lambda_delta(rp: ResidualProblem, cfg: LambdaConfig, rng=None):
    """Greedy approximation ``y`` of ``r`` with relative precision ``delta``.

    Returns ``(y, report)``.  ``y`` is the iterate ``y_M`` at which the
    stagnation estimate ``e_M^p`` first drops to ``delta`` (iterates up to
    ``y_{M+p}`` are computed to evaluate it).  If ``max_rank`` corrections
    do not get there, the last iterate is returned and
    ``report.precision_reached`` is False.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.als.seed)
    report = LambdaReport(delta=cfg.delta, p=cfg.p, seed=cfg.als.seed)
    y = CanonicalTensor.zeros(rp.dims)
    if rp.rhs.rank == 0 or rp.rhs_dual_norm_est == 0.0:
        report.precision_reached = True
        report.stagnation_estimate = 0.0
        return y, report
    history = collections.deque([y], maxlen=cfg.p + 1)
    for m in range(1, cfg.max_rank + 1):
        w = rank_one_correction(rp, y, cfg.als, rng, report)
        if w.rank == 0:
            report.flags.append("zero-correction")
            break
        y = ct_add(y, w)
        for _ in range(cfg.update_passes):
            for mu in _auto_update_dims(cfg, rp.dims, y.rank):
                y = dimension_update(rp, y, mu, cfg.solve_guard, report)
        report.objective_history.append(rp.objective(y))
        report.n_corrections = m
        history.append(y)
        if len(history) == cfg.p + 1:
            e = stagnation_estimate(history, rp.ry)
            report.e_history.append(e)
            if e <= cfg.delta:
                y_m = history[0]
                report.rank = y_m.rank
                report.stagnation_estimate = e
                report.precision_reached = True
                report.ynorm = rp.ry.norm(y_m)
                return y_m, report
    report.rank = y.rank
    report.flags.append("precision_not_certified")
    report.ynorm = rp.ry.norm(y)
    if report.e_history:
        report.stagnation_estimate = report.e_history[-1]
    logger.warning("lambda_delta: stagnation test not met after %d corrections", report.n_corrections)
    return y, report
