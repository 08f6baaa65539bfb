"""Stochastic gradient oracles with growing mini-batches.

A :class:`SmoothModel` describes ``f(x) = E[F(x, xi)]``: its exact gradient,
its Lipschitz constant and a sampler for per-sample gradient deviations
``grad F(x, xi) - grad f(x)``.  :func:`minibatch_gradient` averages
``N_k`` such deviations drawn from a counter-based stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, RejectedInputError
from .rng import CounterStream


def _vec(a):
    a = np.array(a, dtype=float).ravel()
    a.setflags(write=False)
    return a


class SmoothModel:
    dim: int

    @property
    def beta_f(self) -> float:
        """Lipschitz constant of the gradient (Euclidean metric)."""
        raise NotImplementedError

    @property
    def is_deterministic(self) -> bool:
        return False

    def value(self, x) -> float:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def sigma(self, x) -> float:
        """Closed-form ``sqrt(E ||grad F(x, xi) - grad f(x)||^2)``."""
        raise NotImplementedError

    def noise_bound(self, x_star) -> tuple[float, float]:
        """``(sigma0, sigma1)`` with ``sigma(x) <= sigma0 + sigma1 ||x - x_star||``."""
        raise NotImplementedError

    def _deviations(self, x, n, gen) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class DeterministicQuadratic(SmoothModel):
    """``f(x) = 1/2 x^T H x + c^T x`` with no sampling noise."""

    h_matrix: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.h_matrix, dtype=float))
        c = _vec(self.linear)
        if h.shape != (c.size, c.size):
            raise RejectedInputError("h_matrix must be square and match linear")
        if np.max(np.abs(h - h.T)) > 1e-12 * max(1.0, np.max(np.abs(h))):
            raise RejectedInputError("h_matrix must be symmetric")
        w = np.linalg.eigvalsh(h)
        if w[0] < -1e-12 * max(1.0, abs(w[-1])):
            raise RejectedInputError("h_matrix must be positive semidefinite")
        h.setflags(write=False)
        object.__setattr__(self, "h_matrix", h)
        object.__setattr__(self, "linear", c)
        object.__setattr__(self, "_beta", float(max(w[-1], 0.0)))

    @property
    def dim(self):
        return self.linear.size

    @property
    def beta_f(self):
        return self._beta

    @property
    def is_deterministic(self):
        return True

    def value(self, x):
        return float(0.5 * x @ (self.h_matrix @ x) + self.linear @ x)

    def gradient(self, x):
        return self.h_matrix @ x + self.linear

    def sigma(self, x):
        return 0.0

    def noise_bound(self, x_star):
        return 0.0, 0.0

    def _deviations(self, x, n, gen):
        return np.zeros((n, self.dim))


@dataclass(frozen=True, eq=False)
class RandomCoefficientQuadratic(SmoothModel):
    """``F(x, xi) = sum_i q_i(xi) x_i^2 + p_i x_i`` with Gaussian ``q_i(xi)``."""

    q_mean: np.ndarray
    q_std: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        qm, qs, p = _vec(self.q_mean), _vec(self.q_std), _vec(self.p)
        if not (qm.size == qs.size == p.size) or qm.size == 0:
            raise RejectedInputError("q_mean, q_std and p must share a nonzero length")
        if np.any(qm < 0) or np.any(qs < 0):
            raise RejectedInputError("q_mean and q_std must be non-negative")
        object.__setattr__(self, "q_mean", qm)
        object.__setattr__(self, "q_std", qs)
        object.__setattr__(self, "p", p)

    @property
    def dim(self):
        return self.p.size

    @property
    def beta_f(self):
        return 2.0 * float(np.max(self.q_mean))

    @property
    def is_deterministic(self):
        return not np.any(self.q_std)

    def value(self, x):
        return float(np.sum(self.q_mean * x * x + self.p * x))

    def gradient(self, x):
        return 2.0 * self.q_mean * x + self.p

    def sigma(self, x):
        return 2.0 * float(np.linalg.norm(self.q_std * x))

    def noise_bound(self, x_star):
        return self.sigma(np.asarray(x_star, dtype=float)), 2.0 * float(np.max(self.q_std))

    def _deviations(self, x, n, gen):
        z = gen.standard_normal((n, self.dim))
        return z * (2.0 * self.q_std * x)


@dataclass(frozen=True, eq=False)
class AdditiveGaussian(SmoothModel):
    """Base model plus isotropic Gaussian gradient noise."""

    base: SmoothModel
    noise_std: float

    def __post_init__(self):
        if self.noise_std < 0:
            raise RejectedInputError("noise_std must be non-negative")

    @property
    def dim(self):
        return self.base.dim

    @property
    def beta_f(self):
        return self.base.beta_f

    @property
    def is_deterministic(self):
        return self.noise_std == 0 and self.base.is_deterministic

    def value(self, x):
        return self.base.value(x)

    def gradient(self, x):
        return self.base.gradient(x)

    def sigma(self, x):
        return math.hypot(self.base.sigma(x), self.noise_std * math.sqrt(self.dim))

    def noise_bound(self, x_star):
        s0, s1 = self.base.noise_bound(x_star)
        return s0 + self.noise_std * math.sqrt(self.dim), s1

    def _deviations(self, x, n, gen):
        dev = self.base._deviations(x, n, gen)
        if self.noise_std:
            dev = dev + self.noise_std * gen.standard_normal((n, self.dim))
        return dev


@dataclass(frozen=True, eq=False)
class HeavyTailAdditive(SmoothModel):
    """Base model plus noise with Pareto magnitude and uniform direction.

    The magnitude is ``scale * P`` with ``P`` Pareto distributed on
    ``[1, inf)`` with the given tail index, so the second moment is
    ``scale^2 * a / (a - 2)`` while moments of order ``>= a`` are infinite.
    """

    base: SmoothModel
    tail_index: float = 2.5
    scale: float = 1.0

    def __post_init__(self):
        if not self.tail_index > 2:
            raise RejectedInputError("tail_index must exceed 2 for finite variance")
        if self.scale < 0:
            raise RejectedInputError("scale must be non-negative")

    @property
    def dim(self):
        return self.base.dim

    @property
    def beta_f(self):
        return self.base.beta_f

    @property
    def is_deterministic(self):
        return self.scale == 0 and self.base.is_deterministic

    def value(self, x):
        return self.base.value(x)

    def gradient(self, x):
        return self.base.gradient(x)

    def _magnitude_rms(self):
        a = self.tail_index
        return self.scale * math.sqrt(a / (a - 2.0))

    def sigma(self, x):
        return math.hypot(self.base.sigma(x), self._magnitude_rms())

    def noise_bound(self, x_star):
        s0, s1 = self.base.noise_bound(x_star)
        return s0 + self._magnitude_rms(), s1

    def _deviations(self, x, n, gen):
        dev = self.base._deviations(x, n, gen)
        if self.scale:
            r = self.scale * (1.0 + gen.pareto(self.tail_index, n))
            d = gen.standard_normal((n, self.dim))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            dev = dev + r[:, None] * d
        return dev


@dataclass(frozen=True, eq=False)
class SeparableModel(SmoothModel):
    """``f(x) = sum_i f_i(x_i)`` over consecutive blocks.

    Part ``i`` draws its samples from child stream ``i``, which is what lets
    a per-agent evaluation reproduce the stacked one exactly.
    """

    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts:
            raise RejectedInputError("SeparableModel needs at least one part")
        object.__setattr__(self, "parts", parts)
        bounds = np.cumsum([0] + [p.dim for p in parts])
        object.__setattr__(self, "ranges", tuple(zip(bounds[:-1].tolist(), bounds[1:].tolist())))

    @property
    def dim(self):
        return self.ranges[-1][1]

    @property
    def beta_f(self):
        return max(p.beta_f for p in self.parts)

    @property
    def is_deterministic(self):
        return all(p.is_deterministic for p in self.parts)

    def value(self, x):
        return float(sum(p.value(x[a:b]) for p, (a, b) in zip(self.parts, self.ranges)))

    def gradient(self, x):
        return np.concatenate([p.gradient(x[a:b]) for p, (a, b) in zip(self.parts, self.ranges)])

    def sigma(self, x):
        return math.sqrt(sum(p.sigma(x[a:b]) ** 2 for p, (a, b) in zip(self.parts, self.ranges)))

    def noise_bound(self, x_star):
        x_star = np.asarray(x_star, dtype=float)
        bounds = [p.noise_bound(x_star[a:b]) for p, (a, b) in zip(self.parts, self.ranges)]
        return sum(b[0] for b in bounds), max(b[1] for b in bounds)


MAX_BATCH = 2**53


class BatchSchedule:
    def __call__(self, k: int) -> int:
        raise NotImplementedError

    @property
    def grows(self) -> bool:
        return True

    def reciprocal_sum_bound(self) -> float:
        """Upper bound on ``sum_k 1 / N_k`` over all ``k >= 0``."""
        raise NotImplementedError


def _ceil(v: float) -> int:
    if not math.isfinite(v) or v > MAX_BATCH:
        raise ConfigurationError(f"batch size {v:.3g} exceeds the supported maximum")
    # shave representation noise so exact integers are not rounded up
    return max(1, math.ceil(v * (1.0 - 4e-16)))


@dataclass(frozen=True)
class PolynomialSchedule(BatchSchedule):
    """``N_k = ceil(n0 * (k + 1)^exponent)``."""

    n0: int = 1
    exponent: float = 1.2

    def __post_init__(self):
        if self.n0 < 1 or not self.exponent > 1:
            raise ConfigurationError("polynomial schedule needs n0 >= 1 and exponent > 1")

    def __call__(self, k):
        return _ceil(self.n0 * (k + 1) ** self.exponent)

    def reciprocal_sum_bound(self):
        # sum_{j>=1} j^-e <= 1 + 1/(e-1)
        return (1.0 + 1.0 / (self.exponent - 1.0)) / self.n0


@dataclass(frozen=True)
class GeometricSchedule(BatchSchedule):
    """``N_k = ceil(n0 * ratio^k)``."""

    n0: int = 1
    ratio: float = 1.1

    def __post_init__(self):
        if self.n0 < 1 or not self.ratio > 1:
            raise ConfigurationError("geometric schedule needs n0 >= 1 and ratio > 1")

    def __call__(self, k):
        try:
            v = self.n0 * self.ratio**k
        except OverflowError:
            v = math.inf
        return _ceil(v)

    def reciprocal_sum_bound(self):
        return self.ratio / ((self.ratio - 1.0) * self.n0)


@dataclass(frozen=True)
class ConstantSchedule(BatchSchedule):
    """Fixed batch size; does not make the noise summable."""

    n: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("constant schedule needs n >= 1")

    def __call__(self, k):
        return self.n

    @property
    def grows(self):
        return False

    def reciprocal_sum_bound(self):
        return math.inf


def batch_size(schedule: BatchSchedule, k: int) -> int:
    if k < 0:
        raise RejectedInputError("iteration index must be non-negative")
    return schedule(k)


@dataclass(frozen=True, eq=False)
class OracleConfig:
    """Model, batch schedule and declared noise growth ``sigma0 + sigma1 ||x - x*||``.

    When ``sigma0``/``sigma1`` are omitted and ``reference_point`` is given,
    they are filled in from the model's closed-form bound.
    """

    model: SmoothModel
    schedule: BatchSchedule = field(default_factory=PolynomialSchedule)
    sigma0: float | None = None
    sigma1: float | None = None
    reference_point: np.ndarray | None = None
    allow_constant: bool = False

    def __post_init__(self):
        if not self.schedule.grows and not self.allow_constant:
            raise ConfigurationError(
                "a constant batch size needs allow_constant=True (ablation runs only)"
            )
        ref = self.reference_point
        if ref is not None:
            ref = _vec(ref)
            if ref.size != self.model.dim:
                raise RejectedInputError("reference_point has the wrong dimension")
            object.__setattr__(self, "reference_point", ref)
        if self.sigma0 is None or self.sigma1 is None:
            if ref is not None:
                s0, s1 = self.model.noise_bound(ref)
            elif self.model.is_deterministic:
                s0, s1 = 0.0, 0.0
            else:
                s0 = s1 = None
            if self.sigma0 is None:
                object.__setattr__(self, "sigma0", s0)
            if self.sigma1 is None:
                object.__setattr__(self, "sigma1", s1)
        if self.sigma0 is not None and self.sigma0 < 0:
            raise ConfigurationError("sigma0 must be non-negative")

    @property
    def dim(self):
        return self.model.dim


def gradient_exact(model: SmoothModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise RejectedInputError(f"point of shape {x.shape} does not match model dim {model.dim}")
    return model.gradient(x)


def sample_deviations(model: SmoothModel, x, n: int, rng: CounterStream, k: int) -> np.ndarray:
    """``n`` per-sample deviations ``grad F(x, xi_j) - grad f(x)`` as an ``(n, dim)`` array."""
    if isinstance(model, SeparableModel):
        cols = [
            sample_deviations(p, x[a:b], n, rng.child(i), k)
            for i, (p, (a, b)) in enumerate(zip(model.parts, model.ranges))
        ]
        return np.hstack(cols)
    if model.is_deterministic:
        return np.zeros((n, model.dim))
    return model._deviations(x, n, rng.generator(k))


def _mean_deviation(model, x, n, rng, k):
    if isinstance(model, SeparableModel):
        return np.concatenate([
            _mean_deviation(p, x[a:b], n, rng.child(i), k)
            for i, (p, (a, b)) in enumerate(zip(model.parts, model.ranges))
        ])
    if model.is_deterministic:
        return np.zeros(model.dim)
    return model._deviations(x, n, rng.generator(k)).mean(axis=0)


def minibatch_gradient(cfg: OracleConfig, x, k: int, rng: CounterStream):
    """Mini-batch estimate of ``grad f(x)`` at iteration ``k``.

    Returns ``(estimate, N_k)``.  Zero-noise models return the exact gradient
    untouched.
    """
    if k < 0:
        raise RejectedInputError("iteration index must be non-negative")
    grad = gradient_exact(cfg.model, x)
    n = cfg.schedule(k)
    if cfg.model.is_deterministic:
        return grad, n
    return grad + _mean_deviation(cfg.model, np.asarray(x, dtype=float), n, rng, k), n


def estimate_sigma(cfg: OracleConfig, x, samples: int, rng: CounterStream, k: int = 0) -> float:
    """Monte-Carlo estimate of ``sigma(x)`` from single-sample deviations."""
    if samples < 2:
        raise RejectedInputError("need at least two samples")
    x = np.asarray(x, dtype=float)
    dev = sample_deviations(cfg.model, x, samples, rng, k)
    return float(np.sqrt(np.mean(np.sum(dev * dev, axis=1))))


def check_noise_bound(cfg: OracleConfig, points, samples: int, rng: CounterStream, rtol=0.05):
    """Worst ``sigma_hat(x) - (sigma0 + sigma1 ||x - x*||)`` over ``points``.

    The declared bound holds empirically when the result is ``<= rtol``
    times the bound.
    """
    if cfg.reference_point is None or cfg.sigma0 is None or cfg.sigma1 is None:
        raise ConfigurationError("noise bound needs sigma0, sigma1 and reference_point")
    worst = -math.inf
    for i, x in enumerate(points):
        x = np.asarray(x, dtype=float)
        bound = cfg.sigma0 + cfg.sigma1 * float(np.linalg.norm(x - cfg.reference_point))
        est = estimate_sigma(cfg, x, samples, rng.child(i))
        worst = max(worst, est - (1.0 + rtol) * bound)
    return worst
