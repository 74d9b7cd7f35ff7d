"""Weak greedy construction ``u_m = u_{m-1} + w_m`` with rank-one corrections.

Each correction ``w_m`` is a rank-one minimal residual approximation of
``f_{m-1} = u - u_{m-1}``, computed by :func:`gradient_solve` on the
problem with right-hand side ``b - A u_{m-1}``.
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

from .gradient import SolverConfig, _fmt, _json_default, gradient_solve
from .operators import op_apply
from .tensor import CanonicalTensor, FormatSpec, ct_add, ct_from_dense, ct_scale, ct_to_dense, svd2d_project

logger = logging.getLogger(__name__)


def gamma_from_delta(delta, margin=1e-3):
    """Smallest admissible slack ``2 delta / (1 - 2 delta)``, inflated by ``1 + margin``."""
    if delta >= 0.5:
        return float("inf")
    return 2.0 * delta / (1.0 - 2.0 * delta) * (1.0 + margin)


@dataclass
class GreedySchedule:
    """Outer-loop controls.

    ``delta`` is a constant or a sequence indexed by the step (the last
    value is repeated).  ``condition_patience`` stops the loop after that
    many consecutive failed condition checks; None never stops on it.
    """

    r_max: int = 20
    delta: float | tuple = 0.2
    epsilon: float = 0.1
    stop_tol: float = 1e-8
    condition_patience: int | None = None
    retry: bool = True

    def __post_init__(self):
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        ds = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if ds.size == 0 or np.any(ds < 0) or np.any(ds >= 1):
            raise ValueError("every delta_m must lie in [0, 1)")
        if isinstance(self.delta, list):
            self.delta = tuple(self.delta)

    def delta_m(self, m):
        ds = np.atleast_1d(np.asarray(self.delta, dtype=float))
        return float(ds[min(m - 1, ds.size - 1)])

    def gamma_m(self, m):
        return gamma_from_delta(self.delta_m(m))


def greedy_condition_check(alpha_tilde, gamma, epsilon) -> bool:
    """``alpha_tilde**2 <= (1 - epsilon) / ((1 + gamma)**2 - epsilon)``."""
    if not (np.isfinite(alpha_tilde) and gamma >= 0 and 0.0 < epsilon < 1.0):
        if not np.isfinite(gamma):
            return False
        raise ValueError("invalid inputs alpha=%r gamma=%r epsilon=%r" % (alpha_tilde, gamma, epsilon))
    return bool(alpha_tilde**2 <= (1.0 - epsilon) / ((1.0 + gamma) ** 2 - epsilon))


def mu_from_alpha(alpha, gamma):
    """``mu = sqrt((1 - (1+gamma)^2 alpha^2) / (1 - alpha^2))``; 0 where the radicand is negative."""
    if alpha >= 1.0:
        return 0.0
    val = (1.0 - (1.0 + gamma) ** 2 * alpha**2) / (1.0 - alpha**2)
    return float(np.sqrt(val)) if val > 0 else 0.0


@dataclass
class GreedyStep:
    m: int
    delta: float
    gamma: float
    est_before: float
    est_err: float
    alpha_tilde: float
    mu_est: float
    mu_lb_ok: bool
    condition_ok: bool
    rank_y_max: int
    retried: bool = False
    inner_iterations: int = 0
    seconds: float = 0.0
    kappa: float = float("nan")
    true_alpha: float = float("nan")
    true_alpha_tilde: float = float("nan")
    true_err: float = float("nan")


DIAG_FIELDS = ("m", "est_err", "alpha_tilde", "kappa", "mu_lb_ok", "condition_ok", "rank_y_max", "seconds")


@dataclass
class GreedyDiagnostics:
    steps: list = field(default_factory=list)
    corrections: list = field(default_factory=list)
    schedule: dict = field(default_factory=dict)
    status: str = "running"
    est_initial: float = float("nan")

    def __len__(self):
        return len(self.steps)

    def column(self, name):
        return np.array([getattr(s, name) for s in self.steps], dtype=float)

    @property
    def relative_estimates(self):
        return self.column("est_err") / self.est_initial

    def to_csv(self, fh=None, extra=None):
        own = fh is None
        fh = io.StringIO() if own else fh
        extra = extra or {}
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(DIAG_FIELDS) + list(extra))
        for s in self.steps:
            w.writerow([_fmt(getattr(s, f)) for f in DIAG_FIELDS] + [_fmt(v) for v in extra.values()])
        return fh.getvalue() if own else None

    def summary(self):
        return {"status": self.status, "n_steps": len(self.steps), "schedule": self.schedule,
                "est_initial": self.est_initial,
                "final_relative_estimate": float(self.relative_estimates[-1]) if self.steps else None}

    def to_json(self):
        doc = self.summary()
        doc["steps"] = [dataclasses.asdict(s) for s in self.steps]
        return json.dumps(doc, default=_json_default)


def _correction(problem, u, cfg, delta, seed):
    rhs = problem.b if u.rank == 0 else ct_add(problem.b, ct_scale(op_apply(problem.a, u), -1.0))
    sub = problem.with_rhs(rhs)
    kind = "svd2d" if problem.order == 2 else "greedy-rank-one"
    c = cfg.replace(delta=delta, projector=FormatSpec(1, kind), seed=seed)
    return gradient_solve(sub, c)


def weak_greedy_solve(problem, sched: GreedySchedule, cfg: SolverConfig | None = None, oracle=None):
    """Greedy sum of rank-one minimal residual corrections.

    Returns ``(u, diagnostics)``; ``rank(u)`` equals the number of accepted
    corrections.  ``alpha_tilde`` is estimated as the ratio of the error
    estimates after and before the correction.  With ``oracle`` the exact
    ``alpha``, ``alpha_tilde`` and ``kappa`` are recorded too.
    """
    cfg = cfg or SolverConfig(max_outer=20)
    diag = GreedyDiagnostics(schedule=dataclasses.asdict(sched))
    u = CanonicalTensor.zeros(problem.dims)
    fails = 0
    for m in range(1, sched.r_max + 1):
        t0 = time.perf_counter()
        delta = sched.delta_m(m)
        gamma = sched.gamma_m(m)
        seed = cfg.seed + 7919 * m
        w, tr = _correction(problem, u, cfg, delta, seed)
        before, after = tr.records[0].eps_hat, tr.records[-1].eps_hat
        alpha = after / before if before > 0 else 0.0
        ok = greedy_condition_check(alpha, gamma, sched.epsilon)
        retried = False
        if sched.retry and (alpha >= 1.0 or not ok):
            delta, gamma = delta / 2.0, gamma_from_delta(delta / 2.0)
            w2, tr2 = _correction(problem, u, cfg, delta, seed + 1)
            b2, a2 = tr2.records[0].eps_hat, tr2.records[-1].eps_hat
            alpha2 = a2 / b2 if b2 > 0 else 0.0
            retried = True
            if alpha2 <= alpha:
                w, tr, before, after, alpha = w2, tr2, b2, a2, alpha2
            else:
                delta, gamma = sched.delta_m(m), sched.gamma_m(m)
            ok = greedy_condition_check(alpha, gamma, sched.epsilon)
        if m == 1:
            diag.est_initial = before
        if before == 0.0:
            diag.status = "exact"
            break
        if alpha >= 1.0 or w.rank == 0:
            diag.status = "stalled"
            logger.warning("weak greedy stalled at step %d (alpha_tilde=%.3f)", m, alpha)
            break
        mu = mu_from_alpha(alpha, gamma)
        step = GreedyStep(m=m, delta=delta, gamma=gamma, est_before=before, est_err=after,
                          alpha_tilde=alpha, mu_est=mu, mu_lb_ok=bool(mu**2 >= sched.epsilon),
                          condition_ok=ok, rank_y_max=int(max(r.rank_yk for r in tr.records)),
                          retried=retried, inner_iterations=len(tr))
        if oracle is not None:
            _oracle_fields(step, oracle, u, w, problem.rx)
        u = ct_add(u, w)
        diag.corrections.append(w)
        step.seconds = time.perf_counter() - t0
        diag.steps.append(step)
        logger.info("greedy step %d: est=%.3e alpha~=%.3f cond=%s (%.1fs)", m, after, alpha, ok, step.seconds)
        fails = 0 if ok else fails + 1
        if after <= sched.stop_tol * diag.est_initial:
            diag.status = "converged"
            break
        if sched.condition_patience is not None and fails >= sched.condition_patience:
            diag.status = "condition_failed"
            break
    if diag.status == "running":
        diag.status = "max_rank"
    return u, diag


def _oracle_fields(step, oracle, u_prev, w, rx):
    f = oracle.u - ct_to_dense(u_prev).ravel() if u_prev.rank else oracle.u.copy()
    wf = ct_to_dense(w).ravel()
    nf = oracle.x_norm(f)
    step.true_err = oracle.x_norm(f - wf)
    if nf == 0:
        return
    step.true_alpha_tilde = step.true_err / nf
    nw2 = oracle.x_inner(wf, wf)
    if nw2 > 0:
        k2 = 2.0 * oracle.x_inner(f, wf) / nw2 - 1.0
        step.kappa = float(np.sqrt(k2)) if k2 >= 0 else float("nan")
    if len(oracle.dims) == 2:
        best = svd2d_project(ct_from_dense(f.reshape(oracle.dims)), 1, rx)
        step.true_alpha = oracle.x_norm(f - ct_to_dense(best).ravel()) / nf


# --------------------------------------------------------------------------
# audit
# --------------------------------------------------------------------------

@dataclass
class AuditStep:
    m: int
    f_norm: float
    w_tilde_norm: float
    w_norm: float
    kappa: float
    mu: float
    gamma: float
    alpha: float
    alpha_tilde: float
    energy_residual: float
    sandwich_ok: bool
    mu_half_ok: bool
    telescoping_residual: float
    hypothesis_ok: bool


@dataclass
class AuditReport:
    steps: list
    rtol: float
    failures: list

    @property
    def ok(self):
        return not self.failures


def greedy_identities_audit(u_ref, corrections, rx, gammas=None, rtol=1e-9) -> AuditReport:
    """Check the energy identities of a correction sequence against ``u_ref``.

    Per step ``m`` (with ``f = u_ref - u_{m-1}``, ``w`` the best rank-one
    approximation of ``f``):

    (i)   ``||f - w~||^2 = ||f||^2 - kappa^2 ||w~||^2``
    (ii)  ``mu ||w|| <= kappa ||w~|| <= ||w||``
    (iii) ``mu / 2 <= kappa``
    (iv)  ``||f_0||^2 - ||f_m||^2 = sum_i kappa_i^2 ||w~_i||^2``

    ``gammas`` defaults to the tightest slack ``alpha~ / alpha - 1`` for
    which ``w~`` is a ``(1+gamma)``-quasi-optimal correction.  Checks (ii)
    and (iii) are only asserted when that quasi-optimality holds.
    """
    m_dims = rx.dims
    if len(m_dims) != 2:
        raise ValueError("audit needs order-2 tensors (exact rank-one best approximation)")
    g = rx.to_sparse()

    def inner(a, b):
        return float(a @ (g @ b))

    uf = ct_to_dense(u_ref).ravel() if isinstance(u_ref, CanonicalTensor) else np.asarray(u_ref, float).ravel()
    f = uf.copy()
    f0 = inner(f, f)
    acc = 0.0
    steps, failures = [], []
    for i, wt in enumerate(corrections, start=1):
        wtf = ct_to_dense(wt).ravel() if isinstance(wt, CanonicalTensor) else np.asarray(wt, float).ravel()
        nf2 = inner(f, f)
        nwt2 = inner(wtf, wtf)
        k2 = 2.0 * inner(f, wtf) / nwt2 - 1.0
        kappa = float(np.sqrt(k2)) if k2 >= 0 else float("nan")
        f_next = f - wtf
        lhs = inner(f_next, f_next)
        energy = abs(lhs - (nf2 - k2 * nwt2)) / nf2
        best = ct_to_dense(svd2d_project(ct_from_dense(f.reshape(m_dims)), 1, rx)).ravel()
        nw = float(np.sqrt(inner(best, best)))
        alpha = float(np.sqrt(max(inner(f - best, f - best), 0.0) / nf2))
        alpha_t = float(np.sqrt(max(lhs, 0.0) / nf2))
        if gammas is None:
            gamma = max(alpha_t / alpha - 1.0, 0.0) if alpha > 0 else 0.0
        else:
            gamma = float(gammas[i - 1])
        hyp = alpha_t <= (1.0 + gamma) * alpha * (1 + rtol)
        mu = mu_from_alpha(alpha, gamma)
        mid = kappa * np.sqrt(nwt2)
        tol = rtol * np.sqrt(nf2)
        sandwich = bool(mu * nw <= mid + tol and mid <= nw + tol)
        half = bool(mu / 2.0 <= kappa + rtol)
        acc += k2 * nwt2
        tele = abs((f0 - lhs) - acc) / f0
        steps.append(AuditStep(m=i, f_norm=float(np.sqrt(nf2)), w_tilde_norm=float(np.sqrt(nwt2)), w_norm=nw,
                               kappa=kappa, mu=mu, gamma=gamma, alpha=alpha, alpha_tilde=alpha_t,
                               energy_residual=energy, sandwich_ok=sandwich, mu_half_ok=half,
                               telescoping_residual=tele, hypothesis_ok=bool(hyp)))
        if not np.isfinite(kappa):
            failures.append("step %d: kappa^2 = %.3e is negative" % (i, k2))
        if energy > rtol:
            failures.append("step %d: energy identity off by %.3e" % (i, energy))
        if tele > rtol:
            failures.append("step %d: telescoping sum off by %.3e" % (i, tele))
        if hyp and not sandwich:
            failures.append("step %d: mu ||w|| <= kappa ||w~|| <= ||w|| violated" % i)
        if hyp and not half:
            failures.append("step %d: mu/2 <= kappa violated" % i)
        f = f_next
    return AuditReport(steps=steps, rtol=rtol, failures=failures)
