"""Proximable functions and their weighted proximal maps.

``prox(f, Q, x)`` returns ``argmin_u f(u) + 1/2 ||u - x||_Q^2``.  The
conjugate prox is obtained from the weighted Moreau decomposition

    prox^{Q^-1}_{f*}(u) = u - Q^-1 prox^{Q}_{f}(Q u)

evaluated here with ``Q`` replaced by the metric the caller passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RejectedInputError
from .metric import SpdOperator

FEAS_TOL = 1e-9


def _vec(a, name="vector"):
    a = np.array(a, dtype=float).ravel()
    a.setflags(write=False)
    if a.size == 0:
        raise RejectedInputError(f"{name} must be non-empty")
    return a


class ProximableFunction:
    """Base class of the closed catalog of proper, closed, convex functions."""

    dim: int
    separable = False  # coordinatewise separable

    def value(self, x) -> float:
        raise NotImplementedError

    def _prox(self, q: SpdOperator, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def splits_over(self, ranges) -> bool:
        """True when the function is a sum of functions of the given ranges."""
        return self.separable


@dataclass(frozen=True, eq=False)
class Zero(ProximableFunction):
    dim: int
    separable = True

    def value(self, x):
        return 0.0

    def _prox(self, q, x):
        return x.copy()


@dataclass(frozen=True, eq=False)
class BoxIndicator(ProximableFunction):
    lo: np.ndarray
    hi: np.ndarray
    separable = True

    def __post_init__(self):
        lo, hi = _vec(self.lo, "lo"), _vec(self.hi, "hi")
        if lo.shape != hi.shape:
            raise RejectedInputError("lo and hi differ in length")
        if np.any(lo > hi):
            raise RejectedInputError("box needs lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.size

    def value(self, x):
        x = np.asarray(x, dtype=float)
        ok = np.all(x >= self.lo - FEAS_TOL) and np.all(x <= self.hi + FEAS_TOL)
        return 0.0 if ok else np.inf

    def _prox(self, q, x):
        if q.is_diagonal:
            # a diagonal metric does not change the projection onto a box
            return np.clip(x, self.lo, self.hi)
        return box_qp(q.entries, x, self.lo, self.hi)


@dataclass(frozen=True, eq=False)
class PointIndicator(ProximableFunction):
    c: np.ndarray
    separable = True

    def __post_init__(self):
        object.__setattr__(self, "c", _vec(self.c, "c"))

    @property
    def dim(self):
        return self.c.size

    def value(self, x):
        return 0.0 if np.max(np.abs(np.asarray(x) - self.c)) <= FEAS_TOL else np.inf

    def _prox(self, q, x):
        return self.c.copy()


@dataclass(frozen=True, eq=False)
class AffineSetIndicator(ProximableFunction):
    """Indicator of the hyperplane ``{x : <normal, x> = offset}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = _vec(self.normal, "normal")
        if not np.any(n):
            raise RejectedInputError("normal must be nonzero")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dim(self):
        return self.normal.size

    def value(self, x):
        gap = abs(float(self.normal @ x) - self.offset)
        return 0.0 if gap <= FEAS_TOL * max(1.0, abs(self.offset)) else np.inf

    def splits_over(self, ranges):
        return _within_one_range(np.flatnonzero(self.normal), ranges)

    def _prox(self, q, x):
        qn = q.solve(self.normal)
        return x - qn * ((self.normal @ x - self.offset) / (self.normal @ qn))


@dataclass(frozen=True, eq=False)
class SumConstraintIndicator(ProximableFunction):
    """Indicator of ``{x : sum(x) = target}``."""

    dim: int
    target: float

    def __post_init__(self):
        if self.dim < 1:
            raise RejectedInputError("dim must be positive")
        object.__setattr__(self, "target", float(self.target))

    def value(self, x):
        gap = abs(float(np.sum(x)) - self.target)
        return 0.0 if gap <= FEAS_TOL * max(1.0, abs(self.target)) else np.inf

    def splits_over(self, ranges):
        return _within_one_range(np.arange(self.dim), ranges)

    def _prox(self, q, x):
        if q.is_scalar:
            return x - (np.sum(x) - self.target) / self.dim
        ones = np.ones(self.dim)
        qn = q.solve(ones)
        return x - qn * ((np.sum(x) - self.target) / np.sum(qn))


@dataclass(frozen=True, eq=False)
class L1Norm(ProximableFunction):
    """``weight * ||x||_1``."""

    dim: int
    weight: float = 1.0
    separable = True

    def __post_init__(self):
        if self.dim < 1:
            raise RejectedInputError("dim must be positive")
        if self.weight < 0:
            raise RejectedInputError("weight must be non-negative")
        object.__setattr__(self, "weight", float(self.weight))

    def value(self, x):
        return self.weight * float(np.sum(np.abs(x)))

    def _prox(self, q, x):
        if q.is_diagonal:
            t = self.weight / q.diag
            return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
        # the conjugate is the indicator of [-w, w]^n; project in the Q^-1 metric
        w = np.full(self.dim, self.weight)
        qinv = q.inverse()
        return x - q.solve(box_qp(qinv.entries, q.apply(x), -w, w))


@dataclass(frozen=True, eq=False)
class LinearEqualityIndicator(ProximableFunction):
    """Indicator of ``{x : A x = b}`` with ``A`` of full row rank."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = _vec(self.b, "b")
        if a.shape[0] != b.size:
            raise RejectedInputError("A and b disagree in row count")
        if np.linalg.matrix_rank(a) < a.shape[0]:
            raise RejectedInputError("A must have full row rank")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dim(self):
        return self.a.shape[1]

    def value(self, x):
        gap = np.max(np.abs(self.a @ x - self.b))
        return 0.0 if gap <= FEAS_TOL * max(1.0, np.max(np.abs(self.b))) else np.inf

    def splits_over(self, ranges):
        return all(_within_one_range(np.flatnonzero(row), ranges) for row in self.a)

    def _prox(self, q, x):
        qa = np.column_stack([q.solve(col) for col in self.a])  # Q^-1 A^T
        lam = np.linalg.solve(self.a @ qa, self.a @ x - self.b)
        return x - qa @ lam


@dataclass(frozen=True, eq=False)
class SeparableSum(ProximableFunction):
    """Sum of functions acting on consecutive coordinate blocks.

    ``parts`` is a sequence of functions; block ``i`` has length
    ``parts[i].dim``.  The prox needs a metric that is block-diagonal with
    respect to the same blocks.
    """

    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts:
            raise RejectedInputError("SeparableSum needs at least one part")
        object.__setattr__(self, "parts", parts)
        bounds = np.cumsum([0] + [p.dim for p in parts])
        object.__setattr__(self, "ranges", tuple(zip(bounds[:-1].tolist(), bounds[1:].tolist())))

    @property
    def dim(self):
        return self.ranges[-1][1]

    def value(self, x):
        return float(sum(p.value(x[a:b]) for p, (a, b) in zip(self.parts, self.ranges)))

    def splits_over(self, ranges):
        for p, (a, b) in zip(self.parts, self.ranges):
            local = [(max(lo, a) - a, min(hi, b) - a) for lo, hi in ranges if lo < b and hi > a]
            if len(local) > 1 and not p.splits_over(local):
                return False
        return True

    def _prox(self, q, x):
        if not q.is_block_diagonal(self.ranges):
            raise RejectedInputError("metric couples blocks of a SeparableSum")
        out = np.empty_like(x)
        for p, (a, b) in zip(self.parts, self.ranges):
            out[a:b] = p._prox(q.block(a, b), x[a:b])
        return out


def _within_one_range(idx, ranges):
    if idx.size == 0:
        return True
    return any(lo <= idx.min() and idx.max() < hi for lo, hi in ranges)


def _check(f, q, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (f.dim,) or q.dim != f.dim:
        raise RejectedInputError(
            f"dimension mismatch: function {f.dim}, metric {q.dim}, point {x.shape}"
        )
    return x


def prox(f: ProximableFunction, q: SpdOperator, x) -> np.ndarray:
    """Weighted proximal map ``argmin_u f(u) + 1/2 ||u - x||_Q^2``."""
    return f._prox(q, _check(f, q, x))


def prox_conjugate(f: ProximableFunction, q_inv_metric: SpdOperator, u) -> np.ndarray:
    """Prox of the conjugate ``f*`` in the metric ``q_inv_metric``.

    With ``q_inv_metric = Sigma^-1`` this is ``u - Sigma prox^{Sigma}_f(Sigma^-1 u)``.
    """
    u = _check(f, q_inv_metric, u)
    if isinstance(f, PointIndicator):
        # f*(y) = <c, y>, so the prox is an explicit shift
        return u - q_inv_metric.solve(f.c)
    sig = q_inv_metric.inverse()
    return u - sig.apply(f._prox(sig, q_inv_metric.apply(u)))


def box_qp(q, x, lo, hi, *, max_iter=None):
    """Projection onto ``[lo, hi]`` in the dense metric ``q``.

    Solves ``min 1/2 (u - x)^T q (u - x)`` subject to ``lo <= u <= hi`` with a
    primal active-set method, which terminates finitely for a strictly
    convex objective.
    """
    q = np.asarray(q, dtype=float)
    n = x.size
    u = np.clip(x, lo, hi)
    # working set: -1 at lower bound, +1 at upper bound, 0 free
    ws = np.zeros(n, dtype=int)
    ws[(u == lo) & (x != u)] = -1
    ws[(u == hi) & (x != u)] = 1
    ws[lo == hi] = -1
    scale = max(1.0, float(np.max(np.abs(x))), float(np.max(np.abs(np.clip(x, lo, hi)))))
    tol = 1e-13 * scale
    for _ in range(max_iter or 50 * (n + 1) ** 2):
        free = ws == 0
        g = q @ (u - x)
        p = np.zeros(n)
        if np.any(free):
            p[free] = -np.linalg.solve(q[np.ix_(free, free)], g[free])
        if np.max(np.abs(p), initial=0.0) <= tol:
            # multipliers: +g at a lower bound, -g at an upper bound
            mult = np.where(ws == -1, g, np.where(ws == 1, -g, np.inf))
            mult[lo == hi] = np.inf
            j = int(np.argmin(mult))
            if mult[j] >= -tol * max(1.0, float(np.max(np.abs(np.diag(q))))):
                return u
            ws[j] = 0
            continue
        alpha, block, side = 1.0, -1, 0
        for i in np.flatnonzero(free):
            if p[i] < 0 and np.isfinite(lo[i]):
                a = (lo[i] - u[i]) / p[i]
                if a < alpha:
                    alpha, block, side = a, i, -1
            elif p[i] > 0 and np.isfinite(hi[i]):
                a = (hi[i] - u[i]) / p[i]
                if a < alpha:
                    alpha, block, side = a, i, 1
        u = u + max(alpha, 0.0) * p
        if block >= 0:
            u[block] = lo[block] if side < 0 else hi[block]
            ws[block] = side
        u = np.clip(u, lo, hi)
    raise RuntimeError("box_qp did not converge")
