"""Orthonormal (piecewise) Legendre bases for uniform random variables."""
import numpy as np


def legendre_table(t, degree):
    """``P_0..P_degree`` at points ``t`` by the three-term recurrence; (len(t), degree+1)."""
    t = np.asarray(t, dtype=float)
    out = np.empty(t.shape + (degree + 1,))
    out[..., 0] = 1.0
    if degree >= 1:
        out[..., 1] = t
    for k in range(1, degree):
        out[..., k + 1] = ((2 * k + 1) * t * out[..., k] - k * out[..., k - 1]) / (k + 1)
    return out


class LegendreBasis:
    """Orthonormal basis of piecewise polynomials for ``U(low, high)``.

    ``breakpoints`` split the support into pieces; each piece carries
    ``degree + 1`` functions supported on it, normalized so that
    ``E[psi_j psi_k] = delta_jk`` under the uniform law.  Functions are
    ordered piece-major.
    """

    def __init__(self, low, high, degree, breakpoints=()):
        if not high > low:
            raise ValueError("need high > low, got (%r, %r)" % (low, high))
        if degree < 0:
            raise ValueError("degree must be >= 0")
        edges = [float(low)] + sorted(float(b) for b in breakpoints) + [float(high)]
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("breakpoints must lie strictly inside (low, high)")
        self.low, self.high = float(low), float(high)
        self.degree = int(degree)
        self.edges = np.array(edges)
        self.orthonormal = True

    @property
    def n_pieces(self):
        return self.edges.size - 1

    @property
    def size(self):
        return self.n_pieces * (self.degree + 1)

    def _piece_mass(self, k):
        return (self.edges[k + 1] - self.edges[k]) / (self.high - self.low)

    def _piece_values(self, k, y):
        a, b = self.edges[k], self.edges[k + 1]
        t = (2 * y - a - b) / (b - a)
        norms = np.sqrt(2 * np.arange(self.degree + 1) + 1.0)
        return legendre_table(t, self.degree) * norms / np.sqrt(self._piece_mass(k))

    def evaluate(self, y):
        """Basis values at samples ``y``; shape (len(y), size)."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.zeros((y.size, self.size))
        p = self.degree + 1
        for k in range(self.n_pieces):
            a, b = self.edges[k], self.edges[k + 1]
            last = k == self.n_pieces - 1
            inside = (y >= a) & ((y <= b) if last else (y < b))
            out[np.ix_(inside, np.arange(k * p, (k + 1) * p))] = self._piece_values(k, y[inside])
        return out

    def quadrature(self, npts=None):
        """Gauss-Legendre rule per piece: points, probability weights, piece ids."""
        npts = npts or 2 * self.degree + 8
        x, w = np.polynomial.legendre.leggauss(npts)
        pts, wts, ids = [], [], []
        for k in range(self.n_pieces):
            a, b = self.edges[k], self.edges[k + 1]
            pts.append(0.5 * (b - a) * x + 0.5 * (a + b))
            wts.append(0.5 * w * self._piece_mass(k))
            ids.append(np.full(npts, k))
        return np.concatenate(pts), np.concatenate(wts), np.concatenate(ids)

    def _quad_values(self, npts):
        y, w, ids = self.quadrature(npts)
        vals = np.zeros((y.size, self.size))
        p = self.degree + 1
        for k in range(self.n_pieces):
            rows = ids == k
            vals[np.ix_(rows, np.arange(k * p, (k + 1) * p))] = self._piece_values(k, y[rows])
        return y, w, vals

    def moment_matrix(self, fn=None, npts=None):
        """``E[f(y) psi_j(y) psi_k(y)]``; ``fn=None`` gives the Gram matrix."""
        y, w, vals = self._quad_values(npts)
        f = np.ones_like(y) if fn is None else fn(y)
        m = vals.T @ (vals * (w * f)[:, None])
        return 0.5 * (m + m.T)

    def mean(self, npts=None):
        """``E[psi_j]``."""
        _, w, vals = self._quad_values(npts)
        return w @ vals

    def sample(self, rng, size):
        return rng.uniform(self.low, self.high, size)

    def describe(self):
        return {"law": "uniform", "low": self.low, "high": self.high,
                "degree": self.degree, "breakpoints": self.edges[1:-1].tolist(),
                "size": self.size, "orthonormal": True}


class ProductBasis:
    """Tensor product of one-variable bases, flattened in Kronecker order."""

    def __init__(self, bases):
        self.bases = list(bases)
        self.orthonormal = all(b.orthonormal for b in self.bases)

    @property
    def size(self):
        return int(np.prod([b.size for b in self.bases]))

    @property
    def n_vars(self):
        return len(self.bases)

    def evaluate(self, y):
        """``y`` of shape (K, n_vars); returns (K, size)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.ones((y.shape[0], 1))
        for k, b in enumerate(self.bases):
            v = b.evaluate(y[:, k])
            out = (out[:, :, None] * v[:, None, :]).reshape(y.shape[0], -1)
        return out

    def mean(self):
        out = np.ones(1)
        for b in self.bases:
            out = np.kron(out, b.mean())
        return out

    def sample(self, rng, size):
        return np.column_stack([b.sample(rng, size) for b in self.bases])

    def describe(self):
        return {"product": [b.describe() for b in self.bases], "size": self.size}
