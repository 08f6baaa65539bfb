"""Triangularly preconditioned primal-dual iteration, deterministic and stochastic.

For ``min f(x) + g(x) + h(Lx)`` with preconditioners ``Sigma`` (dual) and
``Gamma`` (primal) one step reads::

    y_hat  = prox^{Sigma^-1}_{h*}(y + Sigma L x)
    x_next = prox^{Gamma^-1}_{g}(x - Gamma grad - Gamma L^T y_hat)
    y_next = y_hat + Sigma L (x_next - x)

where ``grad`` is the exact gradient (TriPD) or a mini-batch estimate
(STriPD).  Diagnostics evaluate the deterministic map with the exact
gradient; the algorithm path only ever sees the oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, RejectedInputError, StepSizeError
from .metric import LinearMap, ProductMetric, SpdOperator, assemble_analysis_matrices, extremal_eigs
from .oracle import OracleConfig, minibatch_gradient
from .prox import ProximableFunction, prox, prox_conjugate
from .rng import CounterStream


@dataclass(frozen=True, eq=False)
class CompositeProblem:
    smooth: OracleConfig
    g: ProximableFunction
    h: ProximableFunction
    l: LinearMap
    q_metric: SpdOperator | None = None

    def __post_init__(self):
        n = self.smooth.model.dim
        if self.g.dim != n or self.l.cols != n:
            raise RejectedInputError(
                f"primal dims disagree: f {n}, g {self.g.dim}, L cols {self.l.cols}"
            )
        if self.h.dim != self.l.rows:
            raise RejectedInputError(f"dual dims disagree: h {self.h.dim}, L rows {self.l.rows}")
        if self.q_metric is None:
            object.__setattr__(self, "q_metric", SpdOperator.identity(n))
        elif self.q_metric.dim != n:
            raise RejectedInputError("q_metric has the wrong dimension")

    @property
    def n_primal(self) -> int:
        return self.l.cols

    @property
    def n_dual(self) -> int:
        return self.l.rows

    @property
    def beta_f(self) -> float:
        return self.smooth.model.beta_f


@dataclass(frozen=True, eq=False)
class SolverConfig:
    sigma: SpdOperator
    gamma: SpdOperator
    max_iters: int = 1000
    seed: int = 0
    stop_residual: float = 0.0
    record_every: int = 1
    trial: int = 0

    def __post_init__(self):
        if self.max_iters < 0 or self.record_every < 1 or self.stop_residual < 0:
            raise RejectedInputError("max_iters >= 0, record_every >= 1, stop_residual >= 0")

    @property
    def stream(self) -> CounterStream:
        return CounterStream(self.seed, (self.trial,))

    @property
    def metric(self) -> ProductMetric:
        return ProductMetric(self.sigma, self.gamma)


@dataclass(frozen=True, eq=False)
class PrimalDualState:
    y: np.ndarray
    x: np.ndarray

    @classmethod
    def zeros(cls, problem: CompositeProblem) -> PrimalDualState:
        return cls(np.zeros(problem.n_dual), np.zeros(problem.n_primal))

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.y, self.x])

    @classmethod
    def from_vector(cls, z, n_dual: int) -> PrimalDualState:
        z = np.asarray(z, dtype=float)
        return cls(z[:n_dual].copy(), z[n_dual:].copy())


@dataclass
class IterationRecord:
    k: int
    batch_size: int
    residual: float
    s_dist_to_ref: float | None = None
    cost_gap: float | None = None
    constraint_violation: float | None = None
    z: PrimalDualState | None = field(default=None, repr=False)


@dataclass(frozen=True)
class ValidationReport:
    satisfied: bool
    margin: float
    lambda_min_2U_minus_S: float
    lhs: float
    rhs: float


def _check_dims(problem, cfg, z):
    if cfg.sigma.dim != problem.n_dual or cfg.gamma.dim != problem.n_primal:
        raise RejectedInputError("preconditioner dimensions do not match the problem")
    if z.y.shape != (problem.n_dual,) or z.x.shape != (problem.n_primal,):
        raise RejectedInputError("state dimensions do not match the problem")


def tripd_apply(problem: CompositeProblem, cfg: SolverConfig, z: PrimalDualState, gradient,
                *, dual_in_primal: str = "hat"):
    """One triangular primal-dual update with ``gradient`` standing in for ``grad f(x)``.

    Returns ``(z_next, y_hat, x_next)``.  ``dual_in_primal="current"`` feeds
    the current ``y`` instead of ``y_hat`` into the primal step; it exists
    only for the block-coordinate variant.
    """
    _check_dims(problem, cfg, z)
    sig, gam, l = cfg.sigma, cfg.gamma, problem.l
    y, x = z.y, z.x
    y_hat = prox_conjugate(problem.h, sig.inverse(), y + sig.apply(l.apply(x)))
    y_in = y_hat if dual_in_primal == "hat" else y
    x_next = prox(problem.g, gam.inverse(), x - gam.apply(gradient) - gam.apply(l.adjoint(y_in)))
    y_next = y_hat + sig.apply(l.apply(x_next - x))
    return PrimalDualState(y_next, x_next), y_hat, x_next


def deterministic_map(problem: CompositeProblem, cfg: SolverConfig, z: PrimalDualState) -> PrimalDualState:
    """``T(z)`` evaluated with the exact gradient."""
    return tripd_apply(problem, cfg, z, problem.smooth.model.gradient(z.x))[0]


def fixed_point_residual(problem, cfg, z: PrimalDualState) -> float:
    t = deterministic_map(problem, cfg, z)
    return float(np.sqrt(np.sum((t.y - z.y) ** 2) + np.sum((t.x - z.x) ** 2)))


def s_metric(cfg: SolverConfig) -> SpdOperator:
    return cfg.metric.s_metric


def s_distance(cfg: SolverConfig, z: PrimalDualState, ref: PrimalDualState) -> float:
    dy, dx = z.y - ref.y, z.x - ref.x
    return math.sqrt(float(dy @ cfg.sigma.solve(dy) + dx @ cfg.gamma.solve(dx)))


def stripd_step(problem: CompositeProblem, cfg: SolverConfig, z: PrimalDualState, k: int,
                rng: CounterStream, *, reference: PrimalDualState | None = None,
                diagnose: bool = True):
    """Draw the mini-batch gradient at ``z.x`` and apply one update.

    The record describes the input iterate ``Z_k``; its residual is computed
    with the exact gradient and is skipped (NaN) when ``diagnose`` is false.
    """
    if k < 0:
        raise RejectedInputError("iteration index must be non-negative")
    grad, n = minibatch_gradient(problem.smooth, z.x, k, rng)
    z_next = tripd_apply(problem, cfg, z, grad)[0]
    residual = fixed_point_residual(problem, cfg, z) if diagnose else math.nan
    dist = s_distance(cfg, z, reference) if (diagnose and reference is not None) else None
    return z_next, IterationRecord(k=k, batch_size=n, residual=residual, s_dist_to_ref=dist)


def validate_step_sizes(problem: CompositeProblem, cfg: SolverConfig) -> ValidationReport:
    """Check ``m(Gamma^-1 - beta_f/2 Q) > ||L||^2 M(Sigma)`` and report ``lambda_min(2U - S)``."""
    beta, q = problem.beta_f, problem.q_metric
    a = cfg.gamma.inverse().entries - 0.5 * beta * q.entries
    lhs = extremal_eigs(0.5 * (a + a.T))[0]
    rhs = problem.l.op_norm**2 * cfg.sigma.eig_max
    s, u = assemble_analysis_matrices(cfg.metric, problem.l, beta, q)
    lam = extremal_eigs(2.0 * u - s)[0]
    return ValidationReport(satisfied=bool(lhs > rhs), margin=lhs - rhs,
                            lambda_min_2U_minus_S=lam, lhs=lhs, rhs=rhs)


def default_step_sizes(problem: CompositeProblem, safety: float = 0.9):
    """Scalar ``(Sigma, Gamma)`` that satisfy the step condition.

    ``sigma = 1 / max(||L||, 1)`` and
    ``gamma = safety / (beta_f M(Q) / 2 + sigma ||L||^2)``, shrunk further if
    the strict inequality is not met (e.g. ``safety = 1``).
    """
    if not 0 < safety <= 1:
        raise RejectedInputError("safety must lie in (0, 1]")
    norm = problem.l.op_norm
    sigma = 1.0 / max(norm, 1.0)
    denom = 0.5 * problem.beta_f * problem.q_metric.eig_max + sigma * norm**2
    gamma = safety / denom if denom > 0 else safety
    sig_op = SpdOperator.scalar(sigma, problem.n_dual)
    for _ in range(200):
        gam_op = SpdOperator.scalar(gamma, problem.n_primal)
        cfg = SolverConfig(sig_op, gam_op)
        if validate_step_sizes(problem, cfg).satisfied:
            return sig_op, gam_op
        gamma *= 0.99
    raise StepSizeError("could not find step sizes satisfying the step condition")


def noise_constants(problem: CompositeProblem, cfg: SolverConfig, k: int) -> tuple[float, float]:
    """``(a_k, b_k)`` bounding ``E_k ||F_k - grad f||^2_Gamma <= a_k + b_k ||Z_k - z*||_S^2``."""
    s0, s1 = problem.smooth.sigma0, problem.smooth.sigma1
    if s0 is None or s1 is None:
        raise RejectedInputError("oracle config lacks sigma0/sigma1")
    n = problem.smooth.schedule(k)
    m_gam = cfg.gamma.eig_max
    return 2.0 * s0**2 * m_gam / n, 2.0 * s1**2 * m_gam**2 / n


def solve(problem: CompositeProblem, cfg: SolverConfig, z0: PrimalDualState | None = None,
          reference: PrimalDualState | None = None, *, override: bool = False,
          keep_iterates: bool = False):
    """Run the stochastic iteration; returns ``(final_state, trace)``.

    Stops after ``max_iters`` steps or once the deterministic residual drops
    below ``stop_residual`` (checked on recorded iterations only).
    """
    report = validate_step_sizes(problem, cfg)
    if not report.satisfied and not override:
        raise StepSizeError(f"step condition violated (margin {report.margin:.6g})", report)
    z = PrimalDualState.zeros(problem) if z0 is None else z0
    _check_dims(problem, cfg, z)
    rng = cfg.stream
    trace = []
    for k in range(cfg.max_iters):
        record_now = k % cfg.record_every == 0
        z_next, rec = stripd_step(problem, cfg, z, k, rng, reference=reference, diagnose=record_now)
        if record_now:
            if keep_iterates:
                rec.z = z
            trace.append(rec)
            if cfg.stop_residual > 0 and rec.residual < cfg.stop_residual:
                break
        if not (np.all(np.isfinite(z_next.x)) and np.all(np.isfinite(z_next.y))):
            raise DivergenceError(k, trial=cfg.trial)
        z = z_next
    return z, trace


@dataclass
class FejerReport:
    deterministic_monotone: bool | None
    violations: list = field(default_factory=list)
    excesses: list = field(default_factory=list)


def fejer_check(trace, reference: PrimalDualState, s: SpdOperator | np.ndarray,
                problem: CompositeProblem | None = None, cfg: SolverConfig | None = None,
                *, tol: float = 1e-9) -> FejerReport:
    """Check ``||Z_{k+1} - z*||_S^2 <= ||Z_k - z*||_S^2`` along a trace.

    ``trace`` holds :class:`IterationRecord` objects with stored iterates (or
    bare :class:`PrimalDualState` objects) for consecutive ``k``.  Without a
    noisy problem the check is pathwise and ``deterministic_monotone`` is
    set; with one, per-step excesses over ``2(a_k + b_k d_k)`` are reported for
    inspection and nothing is asserted.
    """
    s_mat = s.entries if isinstance(s, SpdOperator) else np.asarray(s, dtype=float)
    ref = reference.z
    states = [r.z if isinstance(r, IterationRecord) else r for r in trace]
    if any(st is None for st in states):
        raise RejectedInputError("fejer_check needs iterates (solve(..., keep_iterates=True))")
    d = [float((st.z - ref) @ s_mat @ (st.z - ref)) for st in states]
    noisy = problem is not None and not problem.smooth.model.is_deterministic
    report = FejerReport(deterministic_monotone=None if noisy else True)
    ks = [r.k if isinstance(r, IterationRecord) else i for i, r in enumerate(trace)]
    for i in range(len(d) - 1):
        if noisy:
            a, b = noise_constants(problem, cfg, ks[i])
            report.excesses.append((ks[i], d[i + 1] - d[i] - 2.0 * (a + b * d[i])))
        else:
            excess = d[i + 1] - d[i]
            if excess > tol:
                report.violations.append((ks[i], excess))
                report.deterministic_monotone = False
    return report

