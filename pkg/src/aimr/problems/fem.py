"""Q1 finite elements on a uniform grid of the unit square.

Nodes are numbered lexicographically (x fastest).  Matrices are assembled on
all ``(n+1)**2`` nodes and restricted to the ``(n-1)**2`` interior nodes
(homogeneous Dirichlet conditions).
"""
import numpy as np
import scipy.sparse as sp

# reference element [0,1]^2, counter-clockwise from the origin
_CORNERS = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])


def gauss01(npts):
    """Gauss-Legendre points and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


class UniformMesh:
    def __init__(self, n):
        if n < 2:
            raise ValueError("mesh_n must be >= 2")
        self.n = n
        self.h = 1.0 / n
        ix, iy = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
        self.coords = np.column_stack([ix.ravel() * self.h, iy.ravel() * self.h])
        ex, ey = np.meshgrid(np.arange(n), np.arange(n))
        ex, ey = ex.ravel(), ey.ravel()
        self.elements = np.column_stack([
            (ey + cy) * (n + 1) + ex + cx for cx, cy in _CORNERS
        ])
        self.origins = np.column_stack([ex * self.h, ey * self.h])
        inner = (ix > 0) & (ix < n) & (iy > 0) & (iy < n)
        self.interior = np.flatnonzero(inner.ravel())

    @property
    def n_nodes(self):
        return (self.n + 1) ** 2

    @property
    def n_interior(self):
        return self.interior.size

    def interior_coords(self):
        return self.coords[self.interior]

    def restrict(self, mat):
        return sp.csr_matrix(mat)[self.interior][:, self.interior]


def _shape(s, t):
    """Values (q, 4) and reference gradients (q, 4, 2) of the Q1 basis."""
    vals = np.column_stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
    ds = np.column_stack([-(1 - t), 1 - t, t, -t])
    dt = np.column_stack([-(1 - s), -s, s, 1 - s])
    return vals, np.stack([ds, dt], axis=-1)


def _quadrature(mesh, npts):
    g, w = gauss01(npts)
    s, t = [a.ravel() for a in np.meshgrid(g, g, indexing="ij")]
    wq = np.outer(w, w).ravel() * mesh.h**2
    xq = mesh.origins[:, None, :] + mesh.h * np.stack([s, t], axis=-1)[None]
    vals, grads = _shape(s, t)
    return xq, wq, vals, grads / mesh.h


def _scatter(mesh, local):
    rows = np.repeat(mesh.elements, 4, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 4)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2)
    return mat.tocsr()


def stiffness(mesh, kappa=None, npts=3, restrict=True):
    """``int kappa grad(phi_i) . grad(phi_k)``; ``kappa`` a callable of (.., 2) points."""
    xq, wq, _, grads = _quadrature(mesh, npts)
    coef = np.ones(xq.shape[:2]) if kappa is None else kappa(xq)
    local = np.einsum("eq,q,qad,qbd->eab", coef, wq, grads, grads)
    mat = _scatter(mesh, local)
    return mesh.restrict(mat) if restrict else mat


def mass(mesh, coef=None, npts=2, restrict=True):
    xq, wq, vals, _ = _quadrature(mesh, npts)
    c = np.ones(xq.shape[:2]) if coef is None else coef(xq)
    local = np.einsum("eq,q,qa,qb->eab", c, wq, vals, vals)
    mat = _scatter(mesh, local)
    return mesh.restrict(mat) if restrict else mat


def advection(mesh, velocity, npts=3, restrict=True):
    """``int phi_i c . grad(phi_k)`` for a velocity field ``c(x) -> (.., 2)``."""
    xq, wq, vals, grads = _quadrature(mesh, npts)
    c = velocity(xq)
    local = np.einsum("q,qa,eqd,qbd->eab", wq, vals, c, grads)
    mat = _scatter(mesh, local)
    return mesh.restrict(mat) if restrict else mat


def rotating_velocity(x):
    """``c0(x) = (x2 - 1/2, 1/2 - x1)``."""
    return np.stack([x[..., 1] - 0.5, 0.5 - x[..., 0]], axis=-1)


def hat_integrals(n, lo, hi):
    """``int_lo^hi phi_k(t) dt`` for the 1-D hats on ``n`` uniform cells.

    Exact (piecewise linear integrand); returns ``n+1`` values.
    """
    h = 1.0 / n
    nodes = np.arange(n + 1) * h

    def prim(k, t):
        # primitive of the hat centred at node k, clipped to its support
        c = nodes[k]
        a = np.clip(t, c - h, c)
        b = np.clip(t, c, c + h)
        left = (a - (c - h)) ** 2 / (2 * h)
        right = (b - c) - (b - c) ** 2 / (2 * h)
        return left + right

    lo, hi = max(lo, 0.0), min(hi, 1.0)
    if hi <= lo:
        return np.zeros(n + 1)
    return np.array([prim(k, hi) - prim(k, lo) for k in range(n + 1)])


def box_integrals(mesh, box, restrict=True):
    """``int_box phi_i dx`` for an axis-aligned box ``((x0, x1), (y0, y1))``."""
    (x0, x1), (y0, y1) = box
    hx = hat_integrals(mesh.n, x0, x1)
    hy = hat_integrals(mesh.n, y0, y1)
    full = np.outer(hy, hx).ravel()
    return full[mesh.interior] if restrict else full


def nodes_in_box(mesh, box):
    """Interior-node mask of a closed box."""
    (x0, x1), (y0, y1) = box
    xy = mesh.interior_coords()
    tol = 1e-12
    return ((xy[:, 0] >= x0 - tol) & (xy[:, 0] <= x1 + tol)
            & (xy[:, 1] >= y0 - tol) & (xy[:, 1] <= y1 + tol))
