"""Gradient-type minimal residual iteration on a fixed low-rank subset.

The perturbed iteration is

    y^k     ~ R_Y^{-1} (A u^k - b)          (relative Y-precision delta)
    u^{k+1} = Pi(u^k - R_X^{-1} A^T y^k)

with ``Pi`` a (quasi-)best projection on canonical tensors of rank ``r``.
With the ideal dual metric ``R_Y = A R_X^{-1} A^T`` the exact residual
satisfies ``||r^k||_Y = ||u - u^k||_X``, which gives the error estimator
``||y^k||_Y / sqrt(1 - delta**2)``.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .operators import DualMetric, metric_solve, op_adjoint, op_apply
from .residual import (ALSConfig, LambdaConfig, ResidualProblem, dimension_update,
                       lambda_delta, rank_one_correction)
from .tensor import (CanonicalTensor, FormatSpec, RankOneMetric, ct_add, ct_inner, ct_norm,
                     ct_scale, svd2d_project)

logger = logging.getLogger(__name__)

RANK_WARN = 500


class NumericalDivergence(ArithmeticError):
    """Raised when the error estimator blows up; carries the partial trace."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class SolverConfig:
    """Controls of :func:`gradient_solve`.

    ``delta = 0`` selects the exact-residual path (needs a dense oracle).
    ``rho`` other than 1 is only meaningful on that path.
    """

    delta: float = 0.2
    rho: float = 1.0
    max_outer: int = 100
    projector: FormatSpec = field(default_factory=lambda: FormatSpec(10))
    lambda_cfg: LambdaConfig | None = None
    stop_tol: float = 1e-10
    seed: int = 0
    lambda_mode: str = "greedy"  # or "oracle": exact-precision truncation of the dense residual
    stagnation_window: int = 5
    stagnation_tol: float = 1e-4
    divergence_factor: float = 10.0
    projector_als: ALSConfig = field(default_factory=lambda: ALSConfig(max_sweeps=50, stagnation_tol=1e-8))

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.max_outer < 0:
            raise ValueError("max_outer must be >= 0")
        if self.lambda_mode not in ("greedy", "oracle"):
            raise ValueError("lambda_mode must be 'greedy' or 'oracle'")
        if isinstance(self.projector, dict):
            self.projector = FormatSpec(**self.projector)
        if isinstance(self.lambda_cfg, dict):
            self.lambda_cfg = LambdaConfig(**self.lambda_cfg)

    def lambda_config(self) -> LambdaConfig:
        base = self.lambda_cfg or LambdaConfig(delta=max(self.delta, 1e-12))
        return base.replace(delta=self.delta, als=dataclasses.replace(base.als, seed=self.seed))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["projector"] = dataclasses.asdict(self.projector)
        return out


@dataclass
class IterationRecord:
    k: int
    yk_norm: float
    eps_hat: float
    true_err: float = float("nan")
    tau_hat: float = float("nan")
    rank_yk: int = 0
    rank_uk: int = 0
    delta_eff: float = float("nan")
    certified: bool = True
    seconds: float = 0.0


CSV_FIELDS = ("k", "yk_norm", "eps_hat", "true_err", "tau_hat", "rank_yk", "seconds")


@dataclass
class IterationTrace:
    records: list = field(default_factory=list)
    delta: float = 0.0
    status: str = "running"
    stop_reason: str = ""
    rate: float = float("nan")
    gamma_tilde: float = float("nan")
    best_err: float = float("nan")
    final_true_err: float = float("nan")
    flags: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, fh=None, extra=None):
        """Write the per-iteration table; returns the text when ``fh`` is None."""
        own = fh is None
        fh = io.StringIO() if own else fh
        extra = extra or {}
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_FIELDS) + list(extra))
        for r in self.records:
            w.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS] + [_fmt(v) for v in extra.values()])
        return fh.getvalue() if own else None

    def summary(self):
        return {
            "n_records": len(self.records),
            "delta": self.delta,
            "status": self.status,
            "stop_reason": self.stop_reason,
            "rate": self.rate,
            "gamma_tilde": self.gamma_tilde,
            "best_err": self.best_err,
            "final_true_err": self.final_true_err,
            "flags": sorted(set(self.flags)),
        }

    def to_json(self):
        doc = self.summary()
        doc["records"] = [dataclasses.asdict(r) for r in self.records]
        return json.dumps(doc, default=_json_default)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(type(v))


def error_estimator(ynorm, delta):
    """``||y^k||_Y / sqrt(1 - delta**2)``."""
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    return float(ynorm) / np.sqrt(1.0 - delta * delta)


def fit_linear_rate(errors, plateau_window=5, phase_factor=10.0):
    """Per-step contraction factor during the linear phase.

    The plateau is the median of the last ``plateau_window`` values; the
    linear phase keeps the pairs ``(e_k, e_{k+1})`` with
    ``e_{k+1} > phase_factor * plateau``.  Returns the geometric mean of
    ``e_{k+1} / e_k`` over those pairs (0.0 when there are none, meaning the
    plateau was reached in one step).
    """
    e = np.asarray(errors, dtype=float)
    e = e[np.isfinite(e)]
    if e.size < 2:
        return float("nan")
    plateau = float(np.median(e[-plateau_window:]))
    ratios = [b / a for a, b in zip(e[:-1], e[1:]) if b > phase_factor * plateau and a > 0]
    if not ratios:
        return 0.0
    return float(np.exp(np.mean(np.log(ratios))))


# --------------------------------------------------------------------------
# projections
# --------------------------------------------------------------------------

def _gram_blocks(a: CanonicalTensor, b: CanonicalTensor, m: RankOneMetric):
    return [a.factors[mu].T @ m.gram(mu).apply(b.factors[mu]) for mu in range(a.order)]


def _hadamard_except(blocks, mu):
    out = None
    for nu, blk in enumerate(blocks):
        if nu != mu:
            out = blk.copy() if out is None else out * blk
    return out


def _solve_spd_small(phi, rhs):
    try:
        return scipy.linalg.solve(phi, rhs.T, assume_a="pos").T
    except (np.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(phi, rhs.T, rcond=None)[0].T


def _als_fit(target: CanonicalTensor, init, m: RankOneMetric, als: ALSConfig):
    """Cyclic ALS for ``min ||target - w||_m`` over rank-``len(init)`` tensors.

    The metric is rank-one, so the normal equations of dimension ``mu``
    reduce to ``W_mu Phi = T_mu Gamma`` with ``Phi``/``Gamma`` Hadamard
    products of the other dimensions' Grams.
    """
    w = [f.copy() for f in init]
    d = target.order
    tnorm2 = ct_norm(target, m) ** 2
    prev = np.inf
    for _ in range(als.max_sweeps):
        for mu in range(d):
            cur = CanonicalTensor(w)
            phi = _hadamard_except(_gram_blocks(cur, cur, m), mu)
            gam = _hadamard_except(_gram_blocks(target, cur, m), mu)
            w[mu] = _solve_spd_small(phi, target.factors[mu] @ gam)
        cur = CanonicalTensor(w)
        err2 = tnorm2 - 2.0 * ct_inner(target, cur, m) + ct_norm(cur, m) ** 2
        err2 = max(err2, 0.0)
        if abs(prev - err2) <= als.stagnation_tol * max(tnorm2, 1e-300):
            break
        prev = err2
    return CanonicalTensor(w)


def _random_rank_one(dims, rng):
    return [rng.standard_normal((n, 1)) for n in dims]


def project_best(v: CanonicalTensor, spec: FormatSpec, m: RankOneMetric | None = None,
                 rng=None, als: ALSConfig | None = None) -> CanonicalTensor:
    """Quasi-best approximation of ``v`` in the rank-``r`` canonical set.

    Order 2 always uses the exact weighted SVD.  For order > 2,
    ``greedy-rank-one`` fits one term by ALS, and ``als`` builds ``r``
    greedy rank-one terms and then updates all factors cyclically.
    """
    spec.check_order(v.order)
    if m is None:
        m = RankOneMetric.identity(v.dims)
    if v.rank == 0:
        return v
    if v.order == 2:
        return svd2d_project(v, spec.target_rank, m)
    if v.rank <= spec.target_rank and spec.projector_kind == "als":
        return v
    als = als or ALSConfig(max_sweeps=50, stagnation_tol=1e-8)
    rng = rng if rng is not None else np.random.default_rng(als.seed)
    r = spec.target_rank
    u = CanonicalTensor.zeros(v.dims)
    for _ in range(r):
        resid = ct_add(v, ct_scale(u, -1.0))
        if ct_norm(resid, m) <= 1e-14 * ct_norm(v, m):
            break
        w = _als_fit(resid, _random_rank_one(v.dims, rng), m, als)
        u = ct_add(u, w)
    if spec.projector_kind == "als" and u.rank > 1:
        u = _als_fit(v, u.factors, m, als)
    return u


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------

def _residual_functional(problem, u):
    """``A u - b`` as a canonical tensor."""
    if u.rank == 0:
        return ct_scale(problem.b, -1.0)
    return ct_add(op_apply(problem.a, u), ct_scale(problem.b, -1.0))


def _update(problem, u, y, spec, rho, rng, als):
    step = metric_solve(problem.rx, op_apply(op_adjoint(problem.a), y))
    v = ct_add(u, ct_scale(step, -rho))
    if v.rank > RANK_WARN:
        logger.warning("pre-projection rank %d exceeds %d", v.rank, RANK_WARN)
    return project_best(v, spec, problem.rx, rng=rng, als=als)


def _check_stop(trace, cfg, eps):
    """Returns a stop reason or None; raises on divergence."""
    eps0 = trace.records[0].eps_hat
    if eps0 == 0.0 or eps <= cfg.stop_tol * eps0:
        return "tolerance"
    w = cfg.stagnation_window
    if len(trace.records) > w:
        old = trace.records[-1 - w].eps_hat
        if eps > cfg.divergence_factor * old:
            trace.status = "diverged"
            raise NumericalDivergence(
                "error estimator grew from %.3e to %.3e in %d iterations" % (old, eps, w), trace)
        recent = trace.column("eps_hat")[-1 - w:]
        if np.max(np.abs(np.diff(recent))) < cfg.stagnation_tol * old:
            return "stagnation"
    return None


def _finish(trace, oracle, u, spec, errs):
    if oracle is not None:
        trace.final_true_err = oracle.error(u)
        if u.order == 2:
            trace.best_err = oracle.best_error(spec.target_rank)
            if trace.best_err > 0:
                trace.gamma_tilde = trace.final_true_err / trace.best_err - 1.0
        trace.rate = fit_linear_rate(errs)
    else:
        trace.rate = fit_linear_rate(trace.column("eps_hat"))
    if trace.status == "running":
        trace.status = "ok"


def gradient_solve(problem, cfg: SolverConfig, oracle=None, u0=None):
    """Perturbed gradient-type iteration from ``u0`` (default 0).

    Returns ``(u, trace)``.  One trace record is written per evaluated
    residual ``y^k``, including the one of the returned iterate.  With
    ``cfg.delta == 0`` the exact residual of ``oracle`` is used
    (see :func:`ideal_reference_solve`).
    """
    if cfg.delta == 0.0:
        return ideal_reference_solve(problem, cfg.projector, cfg, oracle=oracle, u0=u0)
    if cfg.rho != 1.0:
        raise ValueError("the perturbed iteration uses rho = 1; other steps need delta = 0")
    if cfg.lambda_mode == "oracle" and oracle is None:
        raise ValueError("lambda_mode='oracle' needs a dense oracle")
    spec = cfg.projector
    spec.check_order(problem.order)
    rng = np.random.default_rng(cfg.seed)
    ry = DualMetric(problem.a, problem.rx)
    lcfg = cfg.lambda_config()
    trace = IterationTrace(delta=cfg.delta)
    u = u0 if u0 is not None else CanonicalTensor.zeros(problem.dims)
    errs = []
    for k in range(cfg.max_outer + 1):
        t0 = time.perf_counter()
        certified = True
        if cfg.lambda_mode == "oracle":
            yflat = oracle.truncated_residual(u, cfg.delta, rng)
            y = oracle.to_tensor(yflat)
            ynorm = oracle.y_norm(yflat)
        else:
            g = _residual_functional(problem, u)
            y, rep = lambda_delta(ResidualProblem(problem.a, ry, g), lcfg, rng)
            ynorm = rep.ynorm
            certified = rep.precision_reached
            if not certified:
                trace.flags.append("lambda_not_certified")
            trace.flags.extend(f for f in rep.flags if f != "precision_not_certified")
        rec = IterationRecord(k=k, yk_norm=ynorm, eps_hat=error_estimator(ynorm, cfg.delta),
                              rank_yk=y.rank, rank_uk=u.rank, certified=certified)
        if oracle is not None:
            r = oracle.residual(u)
            rec.true_err = oracle.y_norm(r)
            rec.tau_hat = rec.eps_hat / rec.true_err if rec.true_err > 0 else float("nan")
            yf = yflat if cfg.lambda_mode == "oracle" else _flat_or_none(y, oracle)
            if yf is not None and rec.true_err > 0:
                rec.delta_eff = oracle.y_norm(yf - r) / rec.true_err
            errs.append(rec.true_err)
        rec.seconds = time.perf_counter() - t0
        trace.records.append(rec)
        reason = _check_stop(trace, cfg, rec.eps_hat)
        if reason is None and k == cfg.max_outer:
            reason = "max_outer"
        if reason is not None:
            trace.stop_reason = reason
            break
        u = _update(problem, u, y, spec, 1.0, rng, cfg.projector_als)
    _finish(trace, oracle, u, spec, errs)
    return u, trace


def _flat_or_none(y, oracle):
    try:
        from .tensor import ct_to_dense
        return ct_to_dense(y).ravel()
    except Exception:  # guard exceeded: skip the diagnostic
        return None


def ideal_reference_solve(problem, spec: FormatSpec, cfg: SolverConfig | None = None,
                          oracle=None, rho=None, u0=None):
    """Exact-residual iteration ``u^{k+1} = Pi(u^k - rho R_X^{-1} A^T r^k)``.

    With ``rho = 1`` the first update already equals ``Pi(u)``, so the
    iteration stops after it and the trace holds the single record of
    ``y^0``.
    """
    from .oracle import DenseOracle

    cfg = cfg or SolverConfig(delta=0.0, projector=spec)
    rho = cfg.rho if rho is None else float(rho)
    if not rho > 0:
        raise ValueError("rho must be positive")
    spec.check_order(problem.order)
    oracle = oracle or DenseOracle(problem)
    rng = np.random.default_rng(cfg.seed)
    trace = IterationTrace(delta=0.0)
    u = u0 if u0 is not None else CanonicalTensor.zeros(problem.dims)
    errs = []
    for k in range(cfg.max_outer + 1):
        t0 = time.perf_counter()
        r = oracle.residual(u)
        ynorm = oracle.y_norm(r)
        rec = IterationRecord(k=k, yk_norm=ynorm, eps_hat=ynorm, true_err=oracle.error(u),
                              rank_uk=u.rank, delta_eff=0.0)
        rec.tau_hat = rec.eps_hat / rec.true_err if rec.true_err > 0 else float("nan")
        y = oracle.to_tensor(r)
        rec.rank_yk = y.rank
        errs.append(rec.true_err)
        rec.seconds = time.perf_counter() - t0
        trace.records.append(rec)
        reason = _check_stop(trace, cfg, rec.eps_hat)
        if reason is None and k == cfg.max_outer:
            reason = "max_outer"
        if reason is not None:
            trace.stop_reason = reason
            break
        u = _update(problem, u, y, spec, rho, rng, cfg.projector_als)
        if rho == 1.0:
            trace.stop_reason = "one_step"
            break
    _finish(trace, oracle, u, spec, errs)
    return u, trace


def cmr_solve(problem, spec: FormatSpec, cfg: SolverConfig | None = None,
              strategy="direct", oracle=None, update_passes=2):
    """Minimize the canonical residual norm ``||A v - b||_2`` over rank-``r`` tensors.

    This is the minimal residual problem with solution metric ``A^T A``,
    solved with the residual machinery on ``(A^T, I)``.  ``strategy``:
    ``"greedy"`` adds pure rank-one corrections; ``"direct"`` also updates
    the factors of every dimension after each correction and runs
    ``update_passes`` final sweeps.  One trace record per rank.
    """
    if strategy not in ("direct", "greedy"):
        raise ValueError("strategy must be 'direct' or 'greedy'")
    cfg = cfg or SolverConfig(projector=spec)
    at = op_adjoint(problem.a)
    ry = DualMetric(at, RankOneMetric.identity(at.col_dims))
    rp = ResidualProblem(at, ry, op_apply(at, problem.b))
    rng = np.random.default_rng(cfg.seed)
    als = (cfg.lambda_cfg or LambdaConfig()).als
    solve_guard = (cfg.lambda_cfg or LambdaConfig()).solve_guard
    trace = IterationTrace(delta=float("nan"))
    bnorm = ct_norm(problem.b)
    u = CanonicalTensor.zeros(problem.dims)
    rep = _Flags()
    errs = []

    def record(m, t0):
        res = ct_norm(_residual_functional(problem, u))
        rec = IterationRecord(k=m, yk_norm=res, eps_hat=res / bnorm if bnorm else 0.0,
                              rank_uk=u.rank)
        if oracle is not None:
            rec.true_err = oracle.error(u)
            errs.append(rec.true_err)
        rec.seconds = time.perf_counter() - t0
        trace.records.append(rec)

    for m in range(1, spec.target_rank + 1):
        t0 = time.perf_counter()
        w = rank_one_correction(rp, u, als, rng, rep)
        if w.rank == 0:
            trace.stop_reason = "exact"
            break
        u = ct_add(u, w)
        if strategy == "direct":
            for mu in range(problem.order):
                u = dimension_update(rp, u, mu, solve_guard, rep)
        record(m, t0)
    if strategy == "direct" and u.rank:
        for _ in range(update_passes):
            for mu in range(problem.order):
                u = dimension_update(rp, u, mu, solve_guard, rep)
        trace.records[-1].yk_norm = ct_norm(_residual_functional(problem, u))
        if oracle is not None:
            trace.records[-1].true_err = oracle.error(u)
    trace.flags.extend(rep.flags)
    if "jitter" in rep.flags:
        logger.warning("cmr_solve: reduced normal-equation systems were regularized (ill-conditioned A^T A)")
    trace.stop_reason = trace.stop_reason or "max_rank"
    trace.status = "ok"
    if oracle is not None and problem.order == 2:
        trace.final_true_err = oracle.error(u)
        trace.best_err = oracle.best_error(spec.target_rank)
    return u, trace


class _Flags:
    def __init__(self):
        self.flags = []
