"""Symmetric positive-definite metrics, linear maps and spectral helpers.

Every weighted norm used by the solvers goes through :class:`SpdOperator`,
which remembers whether it is a scalar multiple of the identity or diagonal
so the hot paths stay elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import eigsh

from .errors import RejectedInputError

SYMMETRY_RTOL = 1e-12
PD_FLOOR = 1e-12
DENSE_EIG_LIMIT = 512


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_symmetric(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise RejectedInputError(f"expected a square matrix, got shape {m.shape}")
    scale = max(np.max(np.abs(m)), 1.0) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise RejectedInputError("matrix is not symmetric")
    return m


def power_iteration(m, start, *, tol=1e-15, max_iter=100_000):
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Returns the Rayleigh quotient at convergence.  ``start`` is normalized
    internally; an iterate that collapses to zero yields 0.
    """
    v = np.asarray(start, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v = v / nv
    lam = float(v @ (m @ v))
    stalls = 0
    for _ in range(max_iter):
        w = m @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(v @ (m @ v))
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            stalls += 1
            if stalls >= 3:
                return new
        else:
            stalls = 0
        lam = new
    return lam


def _alternating(n):
    v = np.ones(n)
    v[1::2] = -1.0
    return v


def extremal_eigs(m) -> tuple[float, float]:
    """Smallest and largest eigenvalue of a symmetric matrix."""
    m = _check_symmetric(m)
    n = m.shape[0]
    if n == 0:
        raise RejectedInputError("empty matrix")
    if n <= DENSE_EIG_LIMIT:
        w = np.linalg.eigvalsh(m)
        return float(w[0]), float(w[-1])
    # Lanczos at both ends of the spectrum
    bottom = eigsh(m, k=1, which="SA", tol=0, return_eigenvectors=False, v0=np.ones(n))[0]
    top = eigsh(m, k=1, which="LA", tol=0, return_eigenvectors=False, v0=np.ones(n))[0]
    return float(bottom), float(top)


class SpdOperator:
    """Symmetric positive-definite operator with cached extremal eigenvalues.

    Build with :meth:`from_matrix`, :meth:`diagonal`, :meth:`scalar` or
    :meth:`identity`.  Instances are immutable.
    """

    __slots__ = ("dim", "entries", "eig_min", "eig_max", "_scalar", "_diag", "_inv", "_blocks")

    def __init__(self, entries, *, _scalar=None, _diag=None, _eigs=None):
        entries = _check_symmetric(entries)
        if _eigs is None:
            _eigs = extremal_eigs(entries)
        lo, hi = _eigs
        if not lo > PD_FLOOR:
            raise RejectedInputError(f"matrix is not positive definite (eig_min={lo:.3e})")
        self.dim = entries.shape[0]
        self.entries = _readonly(entries)
        self.eig_min = float(lo)
        self.eig_max = float(hi)
        self._scalar = _scalar
        self._diag = None if _diag is None else _readonly(_diag)
        self._inv = None
        self._blocks = {}

    @classmethod
    def from_matrix(cls, m) -> SpdOperator:
        m = _check_symmetric(m)
        if np.count_nonzero(m - np.diag(np.diagonal(m))) == 0:
            return cls.diagonal(np.diagonal(m))
        return cls(m)

    @classmethod
    def diagonal(cls, d) -> SpdOperator:
        d = np.asarray(d, dtype=float).ravel()
        if d.size == 0:
            raise RejectedInputError("empty diagonal")
        if np.all(d == d[0]):
            return cls.scalar(float(d[0]), d.size)
        return cls(np.diag(d), _diag=d, _eigs=(float(d.min()), float(d.max())))

    @classmethod
    def scalar(cls, c: float, dim: int) -> SpdOperator:
        if dim < 1:
            raise RejectedInputError("dim must be positive")
        c = float(c)
        return cls(c * np.eye(dim), _scalar=c, _diag=np.full(dim, c), _eigs=(c, c))

    @classmethod
    def identity(cls, dim: int) -> SpdOperator:
        return cls.scalar(1.0, dim)

    @property
    def is_scalar(self) -> bool:
        return self._scalar is not None

    @property
    def is_diagonal(self) -> bool:
        return self._diag is not None

    @property
    def diag(self) -> np.ndarray:
        return np.diagonal(self.entries) if self._diag is None else self._diag

    def apply(self, v):
        if self._scalar is not None:
            return self._scalar * v
        if self._diag is not None:
            return self._diag * v
        return self.entries @ v

    def inverse(self) -> SpdOperator:
        if self._inv is None:
            if self._scalar is not None:
                inv = SpdOperator.scalar(1.0 / self._scalar, self.dim)
            elif self._diag is not None:
                inv = SpdOperator.diagonal(1.0 / self._diag)
            else:
                m = np.linalg.inv(self.entries)
                m = 0.5 * (m + m.T)
                inv = SpdOperator(m, _eigs=(1.0 / self.eig_max, 1.0 / self.eig_min))
            inv._inv = self
            self._inv = inv
        return self._inv

    def solve(self, v):
        """Apply the inverse operator."""
        if self._scalar is not None:
            return v / self._scalar
        if self._diag is not None:
            return v / self._diag
        return self.inverse().entries @ v

    def block(self, start: int, stop: int) -> SpdOperator:
        """Principal sub-block on coordinates ``start:stop``."""
        key = (start, stop)
        if key not in self._blocks:
            if self._scalar is not None:
                sub = SpdOperator.scalar(self._scalar, stop - start)
            elif self._diag is not None:
                sub = SpdOperator.diagonal(self._diag[start:stop])
            else:
                sub = SpdOperator.from_matrix(self.entries[start:stop, start:stop])
            self._blocks[key] = sub
        return self._blocks[key]

    def is_block_diagonal(self, ranges) -> bool:
        """True when no entry couples two of the given coordinate ranges."""
        if self._diag is not None:
            return True
        mask = np.ones((self.dim, self.dim), dtype=bool)
        for a, b in ranges:
            mask[a:b, a:b] = False
        return not np.any(self.entries[mask])

    def __repr__(self):
        kind = "scalar" if self.is_scalar else "diagonal" if self.is_diagonal else "dense"
        return f"SpdOperator({kind}, dim={self.dim}, eig=[{self.eig_min:.4g}, {self.eig_max:.4g}])"


@dataclass(frozen=True, eq=False)
class LinearMap:
    """Dense linear map ``cols -> rows`` with cached spectral norm."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.entries, dtype=float))
        if m.ndim != 2 or m.size == 0:
            raise RejectedInputError("LinearMap needs a non-empty 2-D matrix")
        object.__setattr__(self, "entries", _readonly(m))
        object.__setattr__(self, "_norm", None)

    @classmethod
    def identity(cls, n: int) -> LinearMap:
        return cls(np.eye(n))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> LinearMap:
        return cls(np.zeros((rows, cols)))

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    @property
    def op_norm(self) -> float:
        if self._norm is None:
            object.__setattr__(self, "_norm", operator_norm(self))
        return self._norm

    def apply(self, x):
        return self.entries @ x

    def adjoint(self, y):
        return self.entries.T @ y


def operator_norm(l: LinearMap) -> float:
    """Spectral norm by power iteration on ``L^T L``.

    Two fixed starting vectors are used (all-ones and alternating signs) and
    the larger estimate kept, so symmetric maps whose top singular vector is
    orthogonal to the all-ones vector are still handled deterministically.
    """
    m = l.entries
    if not np.any(m):
        return 0.0
    gram = m.T @ m
    n = gram.shape[0]
    lam = max(power_iteration(gram, np.ones(n)), power_iteration(gram, _alternating(n)))
    return float(np.sqrt(max(lam, 0.0)))


def weighted_norm_sq(q: SpdOperator, v) -> float:
    """``<Qv, v>``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (q.dim,):
        raise RejectedInputError(f"vector of shape {v.shape} does not match metric dim {q.dim}")
    return float(v @ q.apply(v))


@dataclass(frozen=True, eq=False)
class ProductMetric:
    """Dual and primal preconditioners (Sigma on the dual, Gamma on the primal)."""

    sigma: SpdOperator
    gamma: SpdOperator

    @property
    def s_metric(self) -> SpdOperator:
        """Block-diagonal ``diag(Sigma^-1, Gamma^-1)``."""
        return block_diag_spd(self.sigma.inverse(), self.gamma.inverse())


def block_diag_spd(a: SpdOperator, b: SpdOperator) -> SpdOperator:
    if a.is_diagonal and b.is_diagonal:
        return SpdOperator.diagonal(np.concatenate([a.diag, b.diag]))
    n, m = a.dim, b.dim
    out = np.zeros((n + m, n + m))
    out[:n, :n] = a.entries
    out[n:, n:] = b.entries
    return SpdOperator(out, _eigs=(min(a.eig_min, b.eig_min), max(a.eig_max, b.eig_max)))


def assemble_analysis_matrices(pm: ProductMetric, l: LinearMap, beta_f: float, q: SpdOperator):
    """Return ``(S, U)`` as dense symmetric arrays.

    ``S = diag(Sigma^-1, Gamma^-1)`` and
    ``U = [[Sigma^-1, -L/2], [-L^T/2, Gamma^-1 - (beta_f/4) Q]]``.
    """
    ny, nx = pm.sigma.dim, pm.gamma.dim
    if l.rows != ny or l.cols != nx or q.dim != nx:
        raise RejectedInputError(
            f"inconsistent dimensions: Sigma {ny}, Gamma {nx}, L {l.rows}x{l.cols}, Q {q.dim}"
        )
    if beta_f < 0:
        raise RejectedInputError("beta_f must be non-negative")
    sig_inv = pm.sigma.inverse().entries
    gam_inv = pm.gamma.inverse().entries
    s = np.zeros((ny + nx, ny + nx))
    s[:ny, :ny] = sig_inv
    s[ny:, ny:] = gam_inv
    u = s.copy()
    u[:ny, ny:] = -0.5 * l.entries
    u[ny:, :ny] = -0.5 * l.entries.T
    u[ny:, ny:] -= 0.25 * beta_f * q.entries
    return s, u
