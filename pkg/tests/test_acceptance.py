"""Acceptance suite: one marked group of tests per criterion.

The terminal summary (see conftest.py) prints one pass/fail line per
criterion number.
"""

import math
import time

import numpy as np
import pytest

from helpers import random_block_problem, random_distributed, random_problem, random_spd, reference_solve
from stripd.block import BlockPartition, block_solve, draw_activations
from stripd.cli import EXIT_OK, cli_main
from stripd.dispatch import BUILTIN_INSTANCE, dispatch_reference, default_run_config, run_trials
from stripd.distributed import equivalence_check
from stripd.metric import LinearMap, SpdOperator
from stripd.oracle import (
    AdditiveGaussian,
    ConstantSchedule,
    DeterministicQuadratic,
    HeavyTailAdditive,
    OracleConfig,
    RandomCoefficientQuadratic,
    gradient_exact,
    minibatch_gradient,
    sample_deviations,
)
from stripd.prox import (
    AffineSetIndicator,
    BoxIndicator,
    L1Norm,
    LinearEqualityIndicator,
    PointIndicator,
    SumConstraintIndicator,
    Zero,
    prox,
    prox_conjugate,
)
from stripd.rng import CounterStream
from stripd.solver import (
    CompositeProblem,
    PrimalDualState,
    SolverConfig,
    default_step_sizes,
    deterministic_map,
    fejer_check,
    s_metric,
    solve,
    validate_step_sizes,
)

acceptance = pytest.mark.acceptance


# 1. fixed-point correspondence on the hand-solvable 1-D problem

@acceptance(1, "fixed point of T and 1-D solve")
def test_criterion_1_fixed_point_and_one_dim_solve():
    start = time.perf_counter()
    # f = (x - 3)^2 / 2, g = box [0, 2], h = indicator of {1}, L = 1; KKT gives x = 1, y = 2
    problem = CompositeProblem(OracleConfig(DeterministicQuadratic([[1.0]], [-3.0])),
                               BoxIndicator([0.0], [2.0]), PointIndicator([1.0]), LinearMap.identity(1))
    sig, gam = default_step_sizes(problem)
    cfg = SolverConfig(sig, gam, max_iters=500)
    z_star = PrimalDualState(np.array([2.0]), np.array([1.0]))
    t = deterministic_map(problem, cfg, z_star)
    assert np.max(np.abs(t.z - z_star.z)) <= 1e-9
    z, _ = solve(problem, cfg, z0=PrimalDualState(np.zeros(1), np.zeros(1)))
    assert abs(z.x[0] - 1.0) < 1e-8
    assert time.perf_counter() - start < 1.0


# 2. deterministic Fejer monotonicity

def kkt_residual(problem, z):
    """Natural residual of the optimality system with unit steps."""
    eye_p, eye_d = SpdOperator.identity(problem.n_primal), SpdOperator.identity(problem.n_dual)
    grad = gradient_exact(problem.smooth.model, z.x)
    rx = z.x - prox(problem.g, eye_p, z.x - grad - problem.l.entries.T @ z.y)
    ry = z.y - prox_conjugate(problem.h, eye_d, z.y + problem.l.entries @ z.x)
    return float(np.linalg.norm(np.concatenate([rx, ry])))


@acceptance(2, "deterministic Fejer monotonicity")
def test_criterion_2_fejer_monotone():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        problem = random_problem(rng)
        z_star, _, _ = reference_solve(problem)
        assert kkt_residual(problem, z_star) < 1e-8
        sig, gam = default_step_sizes(problem)
        cfg = SolverConfig(sig, gam, max_iters=1000)
        z0 = PrimalDualState(3.0 * rng.standard_normal(problem.n_dual),
                             3.0 * rng.standard_normal(problem.n_primal))
        _, trace = solve(problem, cfg, z0=z0, keep_iterates=True)
        report = fejer_check(trace, z_star, s_metric(cfg), tol=1e-9)
        assert report.deterministic_monotone, report.violations[:3]


# 3. step-size condition against the dense spectrum of 2U - S

def dense_2u_minus_s(sigma, gamma, l, beta, q):
    top = np.hstack([np.linalg.inv(sigma), -l])
    bottom = np.hstack([-l.T, np.linalg.inv(gamma) - 0.5 * beta * q])
    return np.vstack([top, bottom])


def scalar_config(rng):
    n, m = int(rng.integers(1, 7)), int(rng.integers(1, 5))
    l = rng.standard_normal((m, n)) * rng.uniform(0.1, 3.0)
    beta = rng.uniform(0.0, 4.0)
    q_scale = rng.uniform(0.5, 2.0)
    problem = CompositeProblem(OracleConfig(DeterministicQuadratic(np.diag(np.full(n, beta)), np.zeros(n))),
                               Zero(n), Zero(m), LinearMap(l), SpdOperator.scalar(q_scale, n))
    sigma = rng.uniform(0.05, 2.0)
    threshold = 1.0 / (0.5 * beta * q_scale + sigma * np.linalg.norm(l, 2) ** 2)
    gamma = threshold * rng.uniform(0.5, 1.5)
    return problem, SolverConfig(SpdOperator.scalar(sigma, m), SpdOperator.scalar(gamma, n))


@acceptance(3, "step-size verdict matches sign of lambda_min(2U - S)")
def test_criterion_3_scalar_configs_verdict_is_exact():
    rng = np.random.default_rng(33)
    seen = set()
    for _ in range(100):
        problem, cfg = scalar_config(rng)
        report = validate_step_sizes(problem, cfg)
        mat = dense_2u_minus_s(cfg.sigma.entries, cfg.gamma.entries, problem.l.entries,
                               problem.beta_f, problem.q_metric.entries)
        lam = np.linalg.eigvalsh(mat)[0]
        if abs(report.margin) > 1e-8:
            assert report.satisfied == (lam > 0), (report.margin, lam)
            seen.add(report.satisfied)
    assert seen == {True, False}


@acceptance(3, "step-size verdict matches sign of lambda_min(2U - S)")
def test_criterion_3_matrix_configs_condition_is_sufficient():
    rng = np.random.default_rng(34)
    accepted = 0
    for _ in range(100):
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        h = random_spd(rng, n, 0.1, 2.0)
        q = random_spd(rng, n, 0.5, 2.0)
        l = rng.standard_normal((m, n))
        problem = CompositeProblem(OracleConfig(DeterministicQuadratic(h, np.zeros(n))), Zero(n), Zero(m),
                                   LinearMap(l), SpdOperator.from_matrix(q))
        sig = random_spd(rng, m, 0.05, 1.0)
        gam = random_spd(rng, n, 0.02, 0.5)
        cfg = SolverConfig(SpdOperator.from_matrix(sig), SpdOperator.from_matrix(gam))
        report = validate_step_sizes(problem, cfg)
        lam = np.linalg.eigvalsh(dense_2u_minus_s(sig, gam, l, problem.beta_f, q))[0]
        if report.satisfied and report.margin > 1e-8:
            accepted += 1
            assert lam > 0
    assert accepted > 0


@acceptance(3, "step-size verdict matches sign of lambda_min(2U - S)")
def test_criterion_3_matrix_condition_is_not_necessary():
    # L ignores the second coordinate, whose large step only the scalar bound penalises
    problem = CompositeProblem(OracleConfig(DeterministicQuadratic(np.zeros((2, 2)), np.zeros(2))),
                               Zero(2), Zero(1), LinearMap(np.array([[1.0, 0.0]])))
    cfg = SolverConfig(SpdOperator.scalar(1.0, 1), SpdOperator.diagonal([0.5, 10.0]))
    report = validate_step_sizes(problem, cfg)
    assert not report.satisfied and report.lambda_min_2U_minus_S > 0


# 4. oracle statistics

def oracle_models():
    base = DeterministicQuadratic(np.diag([1.0, 2.0, 0.5]), [1.0, -1.0, 0.0])
    return {
        "random_coefficient": RandomCoefficientQuadratic([0.5, 1.0, 0.2], [0.2, 0.1, 0.3], [1.0, -2.0, 0.5]),
        "additive_gaussian": AdditiveGaussian(base, 0.7),
        "heavy_tail": HeavyTailAdditive(base, 2.5, 0.5),
    }


def variance_ratio(model, x, n, reps, seed):
    """``N * E||mean_N - grad||^2 / sigma(x)^2`` estimated from ``reps`` mini-batches."""
    cfg = OracleConfig(model, ConstantSchedule(n), allow_constant=True)
    grad = gradient_exact(model, x)
    rng = CounterStream(seed)
    err = np.array([minibatch_gradient(cfg, x, k, rng)[0] - grad for k in range(reps)])
    return n * float(np.mean(np.sum(err * err, axis=1))) / model.sigma(x) ** 2


@acceptance(4, "oracle unbiasedness and 1/N variance scaling")
def test_criterion_4_oracle_statistics():
    start = time.perf_counter()
    x = np.array([1.5, -0.5, 2.0])
    for name, model in oracle_models().items():
        dev = sample_deviations(model, x, 100_000, CounterStream(41), 0)
        se = dev.std(axis=0, ddof=1) / math.sqrt(dev.shape[0])
        assert np.all(np.abs(dev.mean(axis=0)) <= 4 * se), name
        # a finite fourth moment is needed for the variance estimate itself to settle
        checked = HeavyTailAdditive(model.base, 4.5, model.scale) if name == "heavy_tail" else model
        for n, reps in ((10, 10_000), (1000, 2000)):
            ratio = variance_ratio(checked, x, n, reps, seed=n)
            assert abs(ratio - 1.0) <= 0.15, (name, n, ratio)
    assert time.perf_counter() - start < 30.0


# 5. Moreau decomposition and nonexpansiveness

def conjugate_prox_closed_form(f, m, u):
    """``argmin_y f*(y) + 1/2 ||y - u||_M^2`` from the explicit conjugate of ``f``."""
    mat = m.entries
    if isinstance(f, Zero):
        return np.zeros_like(u)
    if isinstance(f, PointIndicator):
        return u - np.linalg.solve(mat, f.c)
    if isinstance(f, L1Norm):
        # conjugate is the indicator of the box [-w, w]; M is diagonal here
        return np.clip(u, -f.weight, f.weight)
    if isinstance(f, BoxIndicator):
        # conjugate is the support function max(lo y, hi y) per coordinate; M is diagonal here
        d = np.diag(mat)
        return np.where(u > f.hi / d, u - f.hi / d, np.where(u < f.lo / d, u - f.lo / d, 0.0))
    if isinstance(f, SumConstraintIndicator):
        a, b = np.ones((1, u.size)), np.array([f.target])
    elif isinstance(f, AffineSetIndicator):
        a, b = f.normal[None, :], np.array([f.offset])
    else:
        a, b = f.a, f.b
    # conjugate of the indicator of {A x = b} is <lam, b> on y = A^T lam
    lam = np.linalg.solve(a @ mat @ a.T, a @ mat @ u - b)
    return a.T @ lam


def random_prox_case(rng):
    n = int(rng.integers(1, 7))
    kind = rng.integers(7)
    dense = SpdOperator.from_matrix(random_spd(rng, n, 0.2, 5.0))
    diag = SpdOperator.diagonal(rng.uniform(0.2, 5.0, n))
    if kind == 0:
        return Zero(n), dense
    if kind == 1:
        return PointIndicator(rng.standard_normal(n)), dense
    if kind == 2:
        return L1Norm(n, rng.uniform(0.1, 2.0)), diag
    if kind == 3:
        lo = rng.standard_normal(n)
        return BoxIndicator(lo, lo + rng.uniform(0.0, 2.0, n)), diag
    if kind == 4:
        return SumConstraintIndicator(n, rng.standard_normal()), dense
    if kind == 5:
        return AffineSetIndicator(rng.standard_normal(n), rng.standard_normal()), dense
    # singular values in [0.5, 2] keep A M A^T away from numerical singularity
    rows = int(rng.integers(1, n + 1))
    u, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    v, _ = np.linalg.qr(rng.standard_normal((n, rows)))
    a = (u * rng.uniform(0.5, 2.0, rows)) @ v.T
    return LinearEqualityIndicator(a, rng.standard_normal(rows)), dense


@acceptance(5, "weighted Moreau identity and prox nonexpansiveness")
def test_criterion_5_moreau_identity():
    rng = np.random.default_rng(55)
    for _ in range(1000):
        f, m = random_prox_case(rng)
        u = 3.0 * rng.standard_normal(f.dim)
        p_star = conjugate_prox_closed_form(f, m, u)
        np.testing.assert_allclose(prox_conjugate(f, m, u), p_star, atol=1e-10, rtol=0)
        # u = prox^M_{f*}(u) + M^-1 prox^{M^-1}_f(M u)
        recon = p_star + m.solve(prox(f, m.inverse(), m.apply(u)))
        np.testing.assert_allclose(recon, u, atol=1e-10, rtol=0)


@acceptance(5, "weighted Moreau identity and prox nonexpansiveness")
def test_criterion_5_nonexpansive_in_gamma_metric():
    rng = np.random.default_rng(56)
    for _ in range(1000):
        f, _ = random_prox_case(rng)
        # dense metrics for every kind, so box and l1 go through the active-set QP
        gamma_inv = SpdOperator.from_matrix(random_spd(rng, f.dim, 0.2, 5.0))
        a, b = 3.0 * rng.standard_normal((2, f.dim))
        pa, pb = prox(f, gamma_inv, a), prox(f, gamma_inv, b)
        lhs = (pa - pb) @ gamma_inv.apply(pa - pb)
        rhs = (a - b) @ gamma_inv.apply(a - b)
        assert lhs <= rhs * (1 + 1e-10) + 1e-12


# 6. dispatch benchmark

@acceptance(6, "dispatch benchmark at desk scale")
def test_criterion_6_dispatch_benchmark():
    x_star, _, _ = dispatch_reference(BUILTIN_INSTANCE)
    assert x_star[4] == 18.0 and abs(np.sum(x_star) - 120.0) < 1e-9
    start = time.perf_counter()
    results = run_trials(default_run_config(trials=100, seed=7, iters=2000))
    elapsed = time.perf_counter() - start
    mean = np.mean(np.stack(results), axis=0)  # iters x (dist, cost gap, violation)
    print(f"dispatch: dist {mean[0, 0]:.4g} -> {mean[-1, 0]:.4g}, violation {mean[-1, 2]:.3g}, "
          f"cost gap {mean[-1, 1]:.3g}, {elapsed:.1f} s")
    assert mean[-1, 0] <= mean[0, 0] / 100
    assert mean[-1, 2] < 1e-2
    assert mean[-1, 1] < 1e-1
    assert elapsed < 300.0


# 7. distributed exactness

@acceptance(7, "distributed iteration equals the stacked centralized one")
def test_criterion_7_distributed_exactness():
    rng = np.random.default_rng(77)
    for i in range(20):
        graph, cons, agents = random_distributed(rng, m=int(rng.integers(1, 6)), noise=0.3 * (i % 2))
        if graph.num_agents == 1:
            cons = []
        assert equivalence_check(graph, cons, agents, iters=100, seed=i) <= 1e-10


# 8. block-coordinate reduction and convergence

@acceptance(8, "block activation reduction and convergence")
def test_criterion_8_full_activation_bit_identical():
    problem, blocks = random_block_problem(np.random.default_rng(80), noise=0.3)
    sig, gam = default_step_sizes(problem)
    cfg = SolverConfig(sig, gam, max_iters=1000, seed=8)
    z_blk, _ = block_solve(problem, cfg, BlockPartition(blocks, (1.0, 1.0)))
    z_ref, _ = solve(problem, cfg)
    np.testing.assert_array_equal(z_blk.z, z_ref.z)


@acceptance(8, "block activation reduction and convergence")
def test_criterion_8_half_activation_converges():
    for seed in (81, 82, 83):
        problem, blocks = random_block_problem(np.random.default_rng(seed), sizes=((1, 2), (2, 3), (1, 1)))
        sig, gam = default_step_sizes(problem)
        z_star, _, res = reference_solve(problem)
        assert res < 1e-10
        cfg = SolverConfig(sig, gam, max_iters=5000, seed=seed)
        z_half, _ = block_solve(problem, cfg, BlockPartition(blocks, (0.5, 0.5, 0.5)))
        assert np.max(np.abs(z_half.x - z_star.x)) < 1e-4


@acceptance(8, "block activation reduction and convergence")
def test_criterion_8_activation_frequencies():
    probs = np.array([0.5, 0.2, 0.9])
    part = BlockPartition((((0, 1), (0, 1)), ((1, 2), (1, 2)), ((2, 3), (2, 3))), tuple(probs))
    rng = CounterStream(88)
    n = 100_000
    counts = sum(draw_activations(part, k, rng).astype(int) for k in range(n))
    assert np.all(np.abs(counts / n - probs) <= 3 * np.sqrt(probs * (1 - probs) / n))


# 9. replay across worker counts

@acceptance(9, "byte-identical bench CSV across worker counts")
def test_criterion_9_bench_replay(tmp_path, capsys):
    csvs = []
    for workers in (1, 4, 8, 1):
        out = tmp_path / f"w{workers}_{len(csvs)}"
        rc = cli_main(["bench", "dispatch", "--trials", "8", "--iters", "300", "--seed", "7",
                       "--workers", str(workers), "--out", str(out)])
        assert rc == EXIT_OK
        csvs.append((out / "trace.csv").read_bytes())
    capsys.readouterr()
    assert all(c == csvs[0] for c in csvs[1:])
