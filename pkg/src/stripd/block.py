"""Random block-coordinate variant of the stochastic primal-dual iteration.

The primal-dual vector is split into blocks ``(y_i, x_i)``.  At each
iteration the full update is computed from one shared mini-batch gradient
and then only the activated blocks take their new values.  Activation is
either independent Bernoulli(p_i) per block ("multi") or a single
categorical draw ("single").
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, RejectedInputError, StepSizeError
from .metric import LinearMap, SpdOperator, block_diag_spd
from .oracle import minibatch_gradient
from .rng import CounterStream
from .solver import (
    CompositeProblem,
    PrimalDualState,
    SolverConfig,
    ValidationReport,
    tripd_apply,
    validate_step_sizes,
)

# activations use their own Philox lane so the oracle draws match stripd_step
ACTIVATION_LANE = 1
MODES = ("multi", "single")


def _check_cover(ranges, n, what):
    spans = sorted((int(a), int(b)) for a, b in ranges)
    pos = 0
    for a, b in spans:
        if a != pos or b < a:
            raise RejectedInputError(f"{what} ranges must be disjoint and cover 0..{n}")
        pos = b
    if pos != n:
        raise RejectedInputError(f"{what} ranges must be disjoint and cover 0..{n}")


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """``blocks[i] = ((ya, yb), (xa, xb))`` with activation probability ``probs[i]``."""

    blocks: tuple
    probs: tuple
    mode: str = "multi"

    def __post_init__(self):
        blocks = tuple(((int(y[0]), int(y[1])), (int(x[0]), int(x[1]))) for y, x in self.blocks)
        probs = tuple(float(p) for p in self.probs)
        if not blocks or len(blocks) != len(probs):
            raise RejectedInputError("one probability per block is required")
        if self.mode not in MODES:
            raise RejectedInputError(f"mode must be one of {MODES}")
        if any(not (0.0 < p <= 1.0) for p in probs):
            raise RejectedInputError("block probabilities must lie in (0, 1]")
        if self.mode == "single" and abs(sum(probs) - 1.0) > 1e-12:
            raise RejectedInputError("single-block mode needs probabilities summing to 1")
        for (ya, yb), (xa, xb) in blocks:
            if ya == yb and xa == xb:
                raise RejectedInputError("empty block")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "probs", probs)

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def y_ranges(self):
        return [y for y, _ in self.blocks]

    @property
    def x_ranges(self):
        return [x for _, x in self.blocks]

    def check(self, problem: CompositeProblem, cfg: SolverConfig) -> None:
        """Reject partitions the block update cannot respect."""
        _check_cover(self.y_ranges, problem.n_dual, "dual")
        _check_cover(self.x_ranges, problem.n_primal, "primal")
        d = problem.l.entries
        for i, (ya, yb) in enumerate(self.y_ranges):
            for j, (xa, xb) in enumerate(self.x_ranges):
                if i != j and np.any(d[ya:yb, xa:xb]):
                    raise RejectedInputError(f"L couples block {i} with block {j}")
        for op, ranges, name in ((cfg.sigma, self.y_ranges, "Sigma"),
                                 (cfg.gamma, self.x_ranges, "Gamma"),
                                 (problem.q_metric, self.x_ranges, "Q")):
            if not op.is_block_diagonal([r for r in ranges if r[0] < r[1]]):
                raise RejectedInputError(f"{name} is not block-diagonal over the partition")
        if not problem.g.splits_over([r for r in self.x_ranges if r[0] < r[1]]):
            raise RejectedInputError("g does not split over the primal blocks")
        if not problem.h.splits_over([r for r in self.y_ranges if r[0] < r[1]]):
            raise RejectedInputError("h does not split over the dual blocks")


@dataclass
class BlockRunRecord:
    k: int
    activated: np.ndarray
    weighted_dist: float | None = None


def draw_activations(partition: BlockPartition, k: int, rng: CounterStream) -> np.ndarray:
    gen = rng.generator(k, ACTIVATION_LANE)
    if partition.mode == "single":
        mask = np.zeros(partition.m, dtype=bool)
        mask[gen.choice(partition.m, p=np.asarray(partition.probs))] = True
        return mask
    return gen.random(partition.m) < np.asarray(partition.probs)


def block_s_metrics(cfg: SolverConfig, partition: BlockPartition) -> list:
    """Per-block ``S_i = diag(Sigma_i^-1, Gamma_i^-1)``."""
    out = []
    for (ya, yb), (xa, xb) in partition.blocks:
        parts = [op.inverse().block(a, b) for op, (a, b) in
                 ((cfg.sigma, (ya, yb)), (cfg.gamma, (xa, xb))) if b > a]
        out.append(parts[0] if len(parts) == 1 else block_diag_spd(*parts))
    return out


def _block_vector(partition, i, z):
    (ya, yb), (xa, xb) = partition.blocks[i]
    return np.concatenate([z.y[ya:yb], z.x[xa:xb]])


def weighted_product_norm(partition: BlockPartition, s_blocks, z) -> float:
    """``sqrt(sum_i ||z^i||^2_{S_i} / p_i)``; ``z`` is a state or a stacked ``(y, x)`` vector."""
    if len(s_blocks) != partition.m:
        raise RejectedInputError("one metric per block is required")
    if not isinstance(z, PrimalDualState):
        ny = max(b for _, b in partition.y_ranges)
        z = PrimalDualState.from_vector(z, ny)
    total = 0.0
    for i, (s_i, p_i) in enumerate(zip(s_blocks, partition.probs)):
        v = _block_vector(partition, i, z)
        if s_i.dim != v.size:
            raise RejectedInputError(f"metric {i} has dim {s_i.dim}, block has {v.size}")
        total += float(v @ s_i.apply(v)) / p_i
    return math.sqrt(total)


def block_step(problem: CompositeProblem, cfg: SolverConfig, partition: BlockPartition,
               z: PrimalDualState, k: int, rng: CounterStream, *,
               dual_in_primal: str = "hat", reference: PrimalDualState | None = None,
               s_blocks=None):
    """One block-coordinate iteration; returns ``(z_next, record)``.

    ``dual_in_primal="current"`` uses the current dual block in the primal
    update instead of the freshly computed one.
    """
    if dual_in_primal not in ("hat", "current"):
        raise RejectedInputError("dual_in_primal must be 'hat' or 'current'")
    grad, _ = minibatch_gradient(problem.smooth, z.x, k, rng)
    full = tripd_apply(problem, cfg, z, grad, dual_in_primal=dual_in_primal)[0]
    active = draw_activations(partition, k, rng)
    y, x = z.y.copy(), z.x.copy()
    for i in np.flatnonzero(active):
        (ya, yb), (xa, xb) = partition.blocks[i]
        y[ya:yb] = full.y[ya:yb]
        x[xa:xb] = full.x[xa:xb]
    dist = None
    if reference is not None:
        s_blocks = s_blocks or block_s_metrics(cfg, partition)
        diff = PrimalDualState(z.y - reference.y, z.x - reference.x)
        dist = weighted_product_norm(partition, s_blocks, diff)
    return PrimalDualState(y, x), BlockRunRecord(k, active, dist)


def validate_blocks(problem: CompositeProblem, cfg: SolverConfig, partition: BlockPartition) -> list:
    """Step condition applied blockwise with ``(Sigma_i, Gamma_i, L_i, beta_f, Q_i)``."""
    partition.check(problem, cfg)
    reports = []
    for (ya, yb), (xa, xb) in partition.blocks:
        if ya == yb or xa == xb:
            # a block without a primal or dual part imposes no coupling condition
            reports.append(ValidationReport(True, math.inf, math.nan, math.inf, 0.0))
            continue
        spec = _Spectral(LinearMap(problem.l.entries[ya:yb, xa:xb]),
                         problem.q_metric.block(xa, xb), problem.beta_f)
        reports.append(validate_step_sizes(spec, SolverConfig(cfg.sigma.block(ya, yb),
                                                              cfg.gamma.block(xa, xb))))
    return reports


# spectral data of one block, enough for validate_step_sizes
@dataclass(frozen=True, eq=False)
class _Spectral:
    l: LinearMap
    q_metric: SpdOperator
    beta_f: float


def block_solve(problem: CompositeProblem, cfg: SolverConfig, partition: BlockPartition,
                z0: PrimalDualState | None = None, reference: PrimalDualState | None = None, *,
                dual_in_primal: str = "hat", override: bool = False):
    """Run ``cfg.max_iters`` block iterations; returns ``(z, records)``."""
    reports = validate_blocks(problem, cfg, partition)
    bad = [r for r in reports if not r.satisfied]
    if bad and not override:
        raise StepSizeError(f"block step condition violated (margin {bad[0].margin:.6g})", bad[0])
    z = PrimalDualState.zeros(problem) if z0 is None else z0
    rng = cfg.stream
    s_blocks = block_s_metrics(cfg, partition) if reference is not None else None
    records = []
    for k in range(cfg.max_iters):
        z_next, rec = block_step(problem, cfg, partition, z, k, rng, dual_in_primal=dual_in_primal,
                                 reference=reference, s_blocks=s_blocks)
        if k % cfg.record_every == 0:
            records.append(rec)
        if not (np.all(np.isfinite(z_next.x)) and np.all(np.isfinite(z_next.y))):
            raise DivergenceError(k, trial=cfg.trial)
        z = z_next
    return z, records
