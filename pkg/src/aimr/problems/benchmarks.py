"""Stochastic Galerkin benchmark problems in tensor format.

Dimension 0 is always the spatial (FE) dimension; the remaining dimensions
carry orthonormal polynomial bases of the random inputs.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..operators import LowRankOperator
from ..tensor import CanonicalTensor, GuardExceeded, RankOneMetric, ct_from_dense
from . import fem
from .polynomials import LegendreBasis, ProductBasis

logger = logging.getLogger(__name__)

SOURCE_BOXES = (((0.45, 0.55), (0.15, 0.25)), ((0.45, 0.55), (0.75, 0.85)))
QOI_BOX = ((0.15, 0.25), (0.45, 0.55))
REFERENCE_GUARD = 200_000


@dataclass
class QoiSpec:
    """Spatial average over an axis-aligned box, ``Q(u) = q^T u``."""

    region: tuple
    q: np.ndarray
    stochastic_means: list
    orthonormal: bool = True


@dataclass
class StochasticTerm:
    """Deterministic view of one operator term: ``K(x) * prod_mu f_mu(xi_mu)``."""

    spatial: sp.spmatrix
    coefficient: object  # callable: list of per-dimension samples -> (K,)


@dataclass
class Problem:
    a: LowRankOperator
    b: CanonicalTensor
    rx: RankOneMetric
    meta: dict = field(default_factory=dict)
    qoi: QoiSpec | None = None
    bases: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    spatial_rhs: np.ndarray | None = None
    mesh: fem.UniformMesh | None = None

    def __post_init__(self):
        if tuple(self.a.col_dims) != tuple(self.b.dims):
            raise ValueError("operator columns %s do not match rhs dims %s" % (self.a.col_dims, self.b.dims))
        if self.rx.dims != tuple(self.b.dims):
            raise ValueError("metric dims %s do not match rhs dims %s" % (self.rx.dims, self.b.dims))

    @property
    def dims(self):
        return tuple(self.b.dims)

    @property
    def order(self):
        return len(self.dims)

    @property
    def n_unknowns(self):
        return int(np.prod(self.dims, dtype=float))

    def with_rhs(self, b):
        return dataclasses.replace(self, b=b)

    def with_metric(self, rx):
        return dataclasses.replace(self, rx=rx)

    # deterministic samples ------------------------------------------------

    def sample_inputs(self, rng, size):
        return [basis.sample(rng, size) for basis in self.bases]

    def evaluate(self, u: CanonicalTensor, xi):
        """Spatial fields ``u(xi_k)``; shape (n_space, K)."""
        vals = np.ones((np.asarray(xi[0]).shape[0], u.rank))
        for mu, basis in enumerate(self.bases, start=1):
            vals *= basis.evaluate(xi[mu - 1]) @ u.factors[mu]
        return u.factors[0] @ vals.T

    def deterministic_solve(self, xi):
        """Exact FE solutions at the samples ``xi``; shape (n_space, K)."""
        k = np.asarray(xi[0]).shape[0]
        coefs = [np.broadcast_to(t.coefficient(xi), (k,)) for t in self.terms]
        out = np.empty((self.dims[0], k))
        for s in range(k):
            mat = sum(c[s] * t.spatial for c, t in zip(coefs, self.terms))
            out[:, s] = spla.spsolve(sp.csc_matrix(mat), self.spatial_rhs)
        return out


def _one(xi):
    return np.ones(np.asarray(xi[0]).shape[0])


def _coordinate(dim, var=0, fn=None):
    def coef(xi):
        y = np.asarray(xi[dim - 1])
        y = y[:, var] if y.ndim == 2 else y
        return y if fn is None else fn(y)
    return coef


def _spatial_pieces(mesh_n):
    mesh = fem.UniformMesh(mesh_n)
    f = fem.box_integrals(mesh, SOURCE_BOXES[0]) - fem.box_integrals(mesh, SOURCE_BOXES[1])
    return mesh, f


def build_qoi(mesh, bases, box=QOI_BOX):
    (x0, x1), (y0, y1) = box
    area = (x1 - x0) * (y1 - y0)
    if area <= 0:
        raise ValueError("empty QoI region")
    q = fem.box_integrals(mesh, box) / area
    return QoiSpec(region=box, q=q, stochastic_means=[b.mean() for b in bases],
                   orthonormal=all(b.orthonormal for b in bases))


@dataclass
class RadSpec:
    """Random inputs of the reaction-advection-diffusion benchmark."""

    advection_range: tuple = (-350.0, 350.0)
    advection_breakpoints: tuple = (0.0,)
    advection_degree: int = 5
    reaction_log_range: tuple = (float(np.log(0.1)), float(np.log(10.0)))
    reaction_degree: int = 5


def build_rad2d(mesh_n=40, stochastic_spec: RadSpec | dict | None = None) -> Problem:
    """Order-2 Galerkin system ``A = D (x) I + C (x) H_1 + R (x) H_2``.

    The two random variables (advection amplitude and log-reaction) share
    one flattened stochastic dimension of size ``p1 * p2``.
    """
    if mesh_n < 4:
        raise ValueError("mesh_n must be >= 4")
    spec = stochastic_spec or RadSpec()
    if isinstance(spec, dict):
        spec = RadSpec(**spec)
    mesh, fx = _spatial_pieces(mesh_n)
    dx = fem.stiffness(mesh, npts=2)
    cx = fem.advection(mesh, fem.rotating_velocity, npts=3)
    rx_mass = fem.mass(mesh, npts=2)

    b1 = LegendreBasis(*spec.advection_range, spec.advection_degree, spec.advection_breakpoints)
    b2 = LegendreBasis(*spec.reaction_log_range, spec.reaction_degree)
    basis = ProductBasis([b1, b2])
    h1 = np.kron(b1.moment_matrix(lambda y: y), np.eye(b2.size))
    h2 = np.kron(np.eye(b1.size), b2.moment_matrix(np.exp))
    p = basis.size
    a = LowRankOperator([
        [dx, sp.identity(p, format="csr")],
        [cx, h1],
        [rx_mass, h2],
    ])
    b = CanonicalTensor.rank_one([fx, basis.mean()])
    terms = [
        StochasticTerm(dx, _one),
        StochasticTerm(cx, _coordinate(1, 0)),
        StochasticTerm(rx_mass, _coordinate(1, 1, np.exp)),
    ]
    qoi = build_qoi(mesh, [basis])
    meta = {
        "name": "rad2d",
        "mesh_n": mesh_n,
        "N": mesh.n_interior,
        "P": p,
        "stochastic": basis.describe(),
        "coefficients": "kappa=1, c=xi1*c0, a=exp(xi2)",
    }
    return Problem(a=a, b=b, rx=RankOneMetric.identity(b.dims), meta=meta, qoi=qoi,
                   bases=[basis], terms=terms, spatial_rhs=fx, mesh=mesh)


def _trig_modes():
    c, s, pi = np.cos, np.sin, np.pi
    return [
        lambda x: c(pi * x[..., 0]),
        lambda x: c(pi * x[..., 1]),
        lambda x: s(pi * x[..., 0]),
        lambda x: s(pi * x[..., 1]),
        lambda x: c(pi * x[..., 0]) * c(pi * x[..., 1]),
        lambda x: s(pi * x[..., 0]) * s(pi * x[..., 1]),
        lambda x: c(pi * x[..., 0]) * s(pi * x[..., 1]),
        lambda x: s(pi * x[..., 0]) * c(pi * x[..., 1]),
    ]


def build_highdim_diffusion(mesh_n=60, degree=7, n_modes=8, kappa0=10.0,
                            advection_range=(0.0, 4000.0), mode_scale=1.0) -> Problem:
    """Order ``n_modes + 2`` problem with random diffusion and advection.

    Dimensions: space, the advection amplitude ``xi_0``, then one dimension
    per diffusion mode ``xi_i ~ U(-1, 1)``.  Terms with an identically zero
    coefficient (``mode_scale=0`` or a degenerate advection range) are
    dropped.
    """
    if mesh_n < 4:
        raise ValueError("mesh_n must be >= 4")
    if not 0 <= n_modes <= 8:
        raise ValueError("n_modes must lie in [0, 8]")
    mesh, fx = _spatial_pieces(mesh_n)
    lo, hi = advection_range
    if hi > lo:
        b0 = LegendreBasis(lo, hi, degree)
    else:
        b0 = _DiracBasis(lo)
    bases = [b0] + [LegendreBasis(-1.0, 1.0, degree) for _ in range(n_modes)]
    wrapped = [ProductBasis([b]) for b in bases]
    dims = (mesh.n_interior,) + tuple(b.size for b in bases)
    eyes = [sp.identity(n, format="csr") for n in dims[1:]]

    op_terms, det_terms = [], []
    k0 = kappa0 * fem.stiffness(mesh, npts=2)
    op_terms.append([k0] + eyes)
    det_terms.append(StochasticTerm(k0, _one))
    if mode_scale != 0.0:
        for i, kappa in enumerate(_trig_modes()[:n_modes]):
            ki = fem.stiffness(mesh, kappa=lambda x, k=kappa: mode_scale * k(x), npts=4)
            facs = [ki] + list(eyes)
            facs[2 + i] = bases[1 + i].moment_matrix(lambda y: y)
            op_terms.append(facs)
            det_terms.append(StochasticTerm(ki, _coordinate(2 + i)))
    if not (lo == 0.0 and hi == 0.0):
        cx = fem.advection(mesh, fem.rotating_velocity, npts=3)
        facs = [cx] + list(eyes)
        facs[1] = b0.moment_matrix(lambda y: y)
        op_terms.append(facs)
        det_terms.append(StochasticTerm(cx, _coordinate(1)))
    a = LowRankOperator(op_terms)
    b = CanonicalTensor.rank_one([fx] + [bb.mean() for bb in bases])
    meta = {
        "name": "highdim",
        "mesh_n": mesh_n,
        "N": mesh.n_interior,
        "degree": degree,
        "n_modes": n_modes,
        "kappa0": kappa0,
        "advection_range": list(advection_range),
        "stochastic": [bb.describe() for bb in bases],
    }
    return Problem(a=a, b=b, rx=RankOneMetric.identity(dims), meta=meta,
                   qoi=build_qoi(mesh, wrapped), bases=wrapped, terms=det_terms,
                   spatial_rhs=fx, mesh=mesh)


class _DiracBasis:
    """Single constant function for a deterministic input."""

    orthonormal = True
    size = 1
    degree = 0

    def __init__(self, value):
        self.value = float(value)

    def evaluate(self, y):
        return np.ones((np.atleast_1d(y).size, 1))

    def moment_matrix(self, fn=None, npts=None):
        return np.array([[1.0 if fn is None else float(fn(np.array([self.value]))[0])]])

    def mean(self, npts=None):
        return np.ones(1)

    def sample(self, rng, size):
        return np.full(size, self.value)

    def describe(self):
        return {"law": "dirac", "value": self.value, "size": 1}


def build_weighted_metric(problem: Problem, region=QOI_BOX, weight=1e3) -> RankOneMetric:
    """``R_X = D_w (x) I``, ``D_w = diag(w(x_i)**2)``; ``w`` on nodes of the closed box, 1 elsewhere."""
    if weight <= 0:
        raise ValueError("weight must be positive")
    if problem.mesh is None:
        raise ValueError("problem carries no mesh")
    inside = fem.nodes_in_box(problem.mesh, region)
    if not inside.any():
        raise ValueError("weight region %s contains no interior node" % (region,))
    w = np.ones(problem.dims[0])
    w[inside] = weight
    return RankOneMetric.diagonal([w**2] + [np.ones(n) for n in problem.dims[1:]])


def reference_solve(problem: Problem, guard=REFERENCE_GUARD, check=1e-10) -> CanonicalTensor:
    """Direct sparse solve of the flattened order-2 system.

    Returns the exact full-rank canonical representation of ``u``.
    """
    if problem.order != 2:
        raise GuardExceeded("direct reference solve needs order 2; use surrogate_reference")
    if problem.n_unknowns > guard:
        raise GuardExceeded("%d unknowns exceed the reference guard %d" % (problem.n_unknowns, guard))
    amat = problem.a.to_sparse().tocsc()
    from ..tensor import ct_to_dense
    rhs = ct_to_dense(problem.b).ravel()
    x = spla.splu(amat).solve(rhs)
    res = np.linalg.norm(amat @ x - rhs) / np.linalg.norm(rhs)
    if res > check:
        raise ArithmeticError("reference residual %.3e exceeds %.1e" % (res, check))
    return ct_from_dense(x.reshape(problem.dims))


def qoi_stats(u: CanonicalTensor, qoi: QoiSpec):
    """Mean and variance of ``Q(u)(xi)`` by Parseval on the orthonormal basis."""
    if not qoi.orthonormal:
        raise ValueError("qoi_stats requires an orthonormal stochastic basis")
    if u.rank == 0:
        return 0.0, 0.0
    spatial = qoi.q @ u.factors[0]
    mean_terms = spatial.copy()
    second = np.outer(spatial, spatial)
    for mu, m in enumerate(qoi.stochastic_means, start=1):
        f = u.factors[mu]
        mean_terms = mean_terms * (m @ f)
        second = second * (f.T @ f)
    mean = float(mean_terms.sum())
    return mean, float(second.sum()) - mean**2


def mc_relative_error(problem: Problem, u_ref: CanonicalTensor, rng, rel_std=0.1,
                      batch=50, max_samples=20_000, norm=None):
    """Monte-Carlo estimate of ``||u - u_ref|| / ||u||`` over the random inputs.

    Samples are drawn in batches until the relative standard deviation of
    both averaged quantities is below ``rel_std``.  Returns
    ``(estimate, n_samples)``.
    """
    if norm is None:
        norm = problem.terms[0].spatial
    num, den = [], []
    while len(num) < max_samples:
        xi = problem.sample_inputs(rng, batch)
        exact = problem.deterministic_solve(xi)
        approx = problem.evaluate(u_ref, xi)
        diff = exact - approx
        num.extend(np.einsum("ik,ik->k", diff, norm @ diff))
        den.extend(np.einsum("ik,ik->k", exact, norm @ exact))
        k = len(num)
        rs_num = np.std(num, ddof=1) / np.sqrt(k) / max(np.mean(num), 1e-300)
        rs_den = np.std(den, ddof=1) / np.sqrt(k) / max(np.mean(den), 1e-300)
        if max(rs_num, rs_den) <= rel_std:
            break
    return float(np.sqrt(np.mean(num) / np.mean(den))), len(num)


def build_identity_problem(dims=(6, 5), rank=1, seed=0) -> Problem:
    """``A = I`` with a seeded random rank-``rank`` right-hand side (so ``u = b``)."""
    rng = np.random.default_rng(seed)
    b = CanonicalTensor([rng.standard_normal((n, rank)) for n in dims])
    a = LowRankOperator.identity(dims)
    return Problem(a=a, b=b, rx=RankOneMetric.identity(b.dims),
                   meta={"name": "identity", "dims": list(dims), "rank": rank, "seed": seed})


PROBLEM_KINDS = ("rad2d", "highdim", "identity")


def build_from_descriptor(desc: dict) -> Problem:
    """Rebuild a problem from its JSON descriptor.

    Keys: ``kind`` (rad2d | highdim | identity), builder arguments, and
    optionally ``norm`` (canonical | weighted), ``weight``, ``region``.
    """
    desc = dict(desc)
    kind = desc.pop("kind", None)
    norm = desc.pop("norm", "canonical")
    weight = desc.pop("weight", None)
    region = desc.pop("region", None)
    if kind == "rad2d":
        prob = build_rad2d(desc.pop("mesh_n", 40), desc.pop("stochastic", None))
        default_w = 1e3
    elif kind == "highdim":
        if "advection_range" in desc:
            desc["advection_range"] = tuple(desc["advection_range"])
        prob = build_highdim_diffusion(**desc)
        desc = {}
        default_w = 1e2
    elif kind == "identity":
        prob = build_identity_problem(tuple(desc.pop("dims", (6, 5))), desc.pop("rank", 1),
                                      desc.pop("seed", 0))
        default_w = None
    else:
        raise ValueError("unknown problem kind %r (expected one of %s)" % (kind, PROBLEM_KINDS))
    if desc:
        raise ValueError("unknown descriptor keys: %s" % sorted(desc))
    if norm == "weighted":
        if default_w is None:
            raise ValueError("weighted norm needs a mesh-based problem")
        box = tuple(tuple(map(float, r)) for r in region) if region is not None else QOI_BOX
        prob = prob.with_metric(build_weighted_metric(prob, box, default_w if weight is None else float(weight)))
        prob.meta = dict(prob.meta, norm="weighted", weight=default_w if weight is None else float(weight))
    elif norm != "canonical":
        raise ValueError("norm must be 'canonical' or 'weighted'")
    else:
        prob.meta = dict(prob.meta, norm="canonical")
    return prob
