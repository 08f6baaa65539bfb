"""Economic dispatch benchmark: instance, reference solution and multi-trial runs.

Generators choose outputs ``x_i`` in ``[lo_i, hi_i]`` minimizing
``sum q_i x_i^2 + p_i x_i`` in expectation over random ``q_i``, subject to
``sum x_i = sum demand``.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import OracleParams, RunConfig, build_operator, build_schedule
from .errors import ConfigurationError, DivergenceError, StepSizeError
from .metric import LinearMap
from .oracle import OracleConfig, RandomCoefficientQuadratic
from .prox import BoxIndicator, PointIndicator, SumConstraintIndicator
from .solver import (
    CompositeProblem,
    PrimalDualState,
    SolverConfig,
    default_step_sizes,
    stripd_step,
    validate_step_sizes,
)

METRICS = ("dist_to_solution", "cost_gap", "constraint_violation")
WORKERS_ENV = "STRIPD_WORKERS"
FEAS_TOL = 1e-9


@dataclass(frozen=True)
class DispatchInstance:
    q_mean: tuple
    p: tuple
    lo: tuple
    hi: tuple
    demand: tuple

    def __post_init__(self):
        for name in ("q_mean", "p", "lo", "hi", "demand"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        m = len(self.q_mean)
        if m == 0 or not (len(self.p) == len(self.lo) == len(self.hi) == m):
            raise ConfigurationError("q_mean, p, lo and hi must share a nonzero length")
        if any(q <= 0 for q in self.q_mean):
            raise ConfigurationError("q_mean must be positive")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ConfigurationError("dispatch bounds need lo <= hi")
        total = self.total_demand
        if not (sum(self.lo) - FEAS_TOL <= total <= sum(self.hi) + FEAS_TOL):
            raise ConfigurationError(
                f"infeasible dispatch: demand {total} outside [{sum(self.lo)}, {sum(self.hi)}]"
            )

    @property
    def m(self) -> int:
        return len(self.q_mean)

    @property
    def total_demand(self) -> float:
        return float(sum(self.demand))

    def arrays(self):
        return tuple(np.array(getattr(self, n)) for n in ("q_mean", "p", "lo", "hi"))

    def cost(self, x) -> float:
        q, p, _, _ = self.arrays()
        return float(np.sum(q * x * x + p * x))

    @classmethod
    def from_dict(cls, d: dict) -> DispatchInstance:
        try:
            return cls(d["q_mean"], d["p"], d["lo"], d["hi"], d["demand"])
        except KeyError as exc:
            raise ConfigurationError(f"dispatch instance is missing {exc}") from None

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


BUILTIN_INSTANCE = DispatchInstance(
    q_mean=(0.094, 0.078, 0.105, 0.082, 0.074),
    p=(1.22, 3.41, 2.53, 4.02, 3.17),
    lo=(10.0, 8.0, 3.8, 5.4, 4.2),
    hi=(80.0, 60.0, 40.0, 45.0, 18.0),
    demand=(35.0, 20.0, 25.0, 30.0, 10.0),
)


def default_q_std(instance: DispatchInstance) -> np.ndarray:
    return 0.1 * np.array(instance.q_mean)


def build_dispatch(instance: DispatchInstance, q_std=None, schedule=None, *,
                   coupling: str = "sum", sigma0=None, sigma1=None) -> CompositeProblem:
    """Composite problem for ``instance``.

    ``coupling="sum"`` encodes ``sum x = sum demand`` with ``L`` the all-ones
    row; ``coupling="elementwise"`` uses ``L = I`` and ``x = demand``.
    """
    q, p, lo, hi = instance.arrays()
    q_std = default_q_std(instance) if q_std is None else np.broadcast_to(
        np.asarray(q_std, dtype=float), q.shape).copy()
    model = RandomCoefficientQuadratic(q, q_std, p)
    if coupling == "sum":
        l = LinearMap(np.ones((1, instance.m)))
        h = SumConstraintIndicator(1, instance.total_demand)
        ref = dispatch_reference(instance)[0]
    elif coupling == "elementwise":
        if len(instance.demand) != instance.m:
            raise ConfigurationError("elementwise coupling needs one demand per generator")
        l = LinearMap.identity(instance.m)
        h = PointIndicator(instance.demand)
        ref = np.clip(np.array(instance.demand), lo, hi)
    else:
        raise ConfigurationError("coupling must be 'sum' or 'elementwise'")
    smooth = OracleConfig(model, schedule or build_schedule(OracleParams().schedule),
                          sigma0, sigma1, reference_point=ref)
    return CompositeProblem(smooth, BoxIndicator(lo, hi), h, l)


def _response(lam, q, p, lo, hi):
    return np.clip((lam - p) / (2.0 * q), lo, hi)


def dispatch_reference(instance: DispatchInstance):
    """``(x_star, lambda_star, cost_star)`` by bisection on the demand multiplier."""
    q, p, lo, hi = instance.arrays()
    target = instance.total_demand
    if np.all(lo == hi):
        return lo.copy(), math.nan, instance.cost(lo)
    a = float(np.min(p + 2.0 * q * lo))
    b = float(np.max(p + 2.0 * q * hi))
    for _ in range(2000):
        mid = 0.5 * (a + b)
        if mid in (a, b):
            break
        gap = float(np.sum(_response(mid, q, p, lo, hi))) - target
        if abs(gap) < 1e-12:
            a = b = mid
            break
        if gap < 0:
            a = mid
        else:
            b = mid
    lam = 0.5 * (a + b)
    x = _response(lam, q, p, lo, hi)
    free = (x > lo) & (x < hi)
    if np.any(free):
        # put the residual rounding error on the interior generators
        x[free] += (target - np.sum(x)) / np.count_nonzero(free)
    return x, lam, instance.cost(x)


def dispatch_enumerate(instance: DispatchInstance):
    """Reference by enumerating every lower/upper/free bound pattern (small ``m`` only)."""
    q, p, lo, hi = instance.arrays()
    if instance.m > 10:
        raise ConfigurationError("enumeration is limited to m <= 10")
    target = instance.total_demand
    best = None
    for pattern in itertools.product((0, 1, 2), repeat=instance.m):
        pat = np.array(pattern)
        x = np.where(pat == 0, lo, hi).astype(float)
        free = pat == 2
        lam = math.nan
        if np.any(free):
            w = 1.0 / (2.0 * q[free])
            lam = (target - np.sum(x[~free]) + np.sum(p[free] * w)) / np.sum(w)
            x[free] = (lam - p[free]) * w
        scale = max(1.0, abs(target))
        if abs(np.sum(x) - target) > 1e-9 * scale:
            continue
        if np.any(x < lo - 1e-9 * scale) or np.any(x > hi + 1e-9 * scale):
            continue
        c = instance.cost(x)
        if best is None or c < best[2] - 1e-12 * max(1.0, abs(c)):
            best = (x, lam, c)
    if best is None:
        raise ConfigurationError("no feasible bound pattern")
    return best


def constraint_violation(instance: DispatchInstance, x) -> float:
    _, _, lo, hi = instance.arrays()
    box = np.sum(np.maximum(lo - x, 0.0) + np.maximum(x - hi, 0.0))
    return abs(float(np.sum(x)) - instance.total_demand) + float(box)


@dataclass(frozen=True)
class TrialSummary:
    iters: np.ndarray
    stats: dict  # metric -> (min, mean, max) arrays over iters

    def rows(self):
        for j, k in enumerate(self.iters):
            for name in METRICS:
                lo, mean, hi = (self.stats[name][i][j] for i in range(3))
                yield int(k), name, float(lo), float(mean), float(hi)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "metric", "min", "mean", "max"])
        for k, name, lo, mean, hi in self.rows():
            w.writerow([k, name, repr(lo), repr(mean), repr(hi)])
        return buf.getvalue()


@dataclass(frozen=True)
class BenchmarkSetup:
    instance: DispatchInstance
    problem: CompositeProblem
    solver: SolverConfig
    x_star: np.ndarray
    lambda_star: float
    cost_star: float


def dispatch_setup(cfg: RunConfig) -> BenchmarkSetup:
    pd = cfg.problem
    instance = BUILTIN_INSTANCE if pd.get("instance") in (None, "builtin") else \
        DispatchInstance.from_dict(pd["instance"])
    coupling = pd.get("coupling", "sum")
    problem = build_dispatch(instance, cfg.oracle.q_std, build_schedule(cfg.oracle.schedule),
                             coupling=coupling, sigma0=cfg.oracle.sigma0, sigma1=cfg.oracle.sigma1)
    sp = cfg.solver
    sig = build_operator(sp.sigma, problem.n_dual)
    gam = build_operator(sp.gamma, problem.n_primal)
    if sig is None or gam is None:
        d_sig, d_gam = default_step_sizes(problem, sp.safety)
        sig, gam = sig or d_sig, gam or d_gam
    solver = SolverConfig(sig, gam, max_iters=sp.max_iters, seed=cfg.master_seed,
                          stop_residual=sp.stop_residual, record_every=sp.record_every)
    x_star, lam, cost = dispatch_reference(instance)
    return BenchmarkSetup(instance, problem, solver, x_star, lam, cost)


def _trial_metrics(setup: BenchmarkSetup, trial: int) -> np.ndarray:
    """``(K + 1, 3)`` metrics at iterates ``0..K`` of one trial."""
    problem, inst = setup.problem, setup.instance
    cfg = SolverConfig(setup.solver.sigma, setup.solver.gamma, max_iters=setup.solver.max_iters,
                       seed=setup.solver.seed, trial=trial)
    rng = cfg.stream
    z = PrimalDualState.zeros(problem)
    iters = cfg.max_iters
    out = np.empty((iters + 1, len(METRICS)))
    for k in range(iters + 1):
        x = z.x
        out[k] = (np.linalg.norm(x - setup.x_star), abs(inst.cost(x) - setup.cost_star),
                  constraint_violation(inst, x))
        if k == iters:
            break
        z = stripd_step(problem, cfg, z, k, rng, diagnose=False)[0]
        if not (np.all(np.isfinite(z.x)) and np.all(np.isfinite(z.y))):
            raise DivergenceError(k, trial=trial)
    return out


def _run_one(args):
    cfg_text, trial = args
    return _trial_metrics(dispatch_setup(RunConfig.loads(cfg_text)), trial)


def worker_count(default=None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer") from None
        if n < 1:
            raise ConfigurationError(f"{WORKERS_ENV} must be positive")
        return n
    return default or os.cpu_count() or 1


def run_trials(cfg: RunConfig, workers: int | None = None) -> list:
    workers = worker_count(workers)
    if workers == 1 or cfg.trials == 1:
        setup = dispatch_setup(cfg)
        return [_trial_metrics(setup, t) for t in range(cfg.trials)]
    text = cfg.dumps()
    with ProcessPoolExecutor(max_workers=min(workers, cfg.trials)) as pool:
        return list(pool.map(_run_one, [(text, t) for t in range(cfg.trials)]))


def aggregate(results: list) -> TrialSummary:
    """Min/mean/max across trials, reduced in trial order."""
    stack = np.stack(results)  # trials x iters x metrics
    n_iter = stack.shape[1]
    stats = {}
    for j, name in enumerate(METRICS):
        col = stack[:, :, j]
        stats[name] = (col.min(axis=0), col.mean(axis=0), col.max(axis=0))
    return TrialSummary(np.arange(n_iter), stats)


def run_benchmark(cfg: RunConfig, out_dir=None, workers: int | None = None, force: bool = False):
    """Run every trial, write ``trace.csv`` and ``meta.json``; returns ``(summary, meta)``."""
    setup = dispatch_setup(cfg)
    report = validate_step_sizes(setup.problem, setup.solver)
    if not report.satisfied and not force:
        raise StepSizeError(f"step condition violated (margin {report.margin:.6g})", report)
    summary = aggregate(run_trials(cfg, workers))
    meta = {
        "config": cfg.to_dict(),
        "reference": {
            "x_star": setup.x_star.tolist(),
            "lambda_star": setup.lambda_star,
            "cost_star": setup.cost_star,
            "total": float(np.sum(setup.x_star)),
        },
        "step_sizes": {
            "sigma_max": setup.solver.sigma.eig_max,
            "gamma_max": setup.solver.gamma.eig_max,
            "margin": report.margin,
            "lambda_min_2U_minus_S": report.lambda_min_2U_minus_S,
        },
        "assumed_settings": {
            "note": "chosen defaults, not values taken from a published experiment",
            "q_std": "0.1 * q_mean" if cfg.oracle.q_std is None else cfg.oracle.q_std,
            "iterations": cfg.solver.max_iters,
            "schedule": cfg.oracle.schedule,
        },
    }
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_text(summary.to_csv())
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return summary, meta


def default_run_config(trials: int = 100, seed: int = 7, iters: int = 2000,
                     output_dir: str = "out") -> RunConfig:
    return RunConfig(problem={"kind": "dispatch", "instance": "builtin", "coupling": "sum"},
                     trials=trials, master_seed=seed, output_dir=output_dir,
                     solver={"max_iters": iters})
