"""Random instance generators shared by the test modules."""

import numpy as np

from stripd.metric import LinearMap, SpdOperator
from stripd.oracle import DeterministicQuadratic, OracleConfig
from stripd.prox import BoxIndicator, L1Norm, SumConstraintIndicator, Zero
from stripd.solver import CompositeProblem, SolverConfig, default_step_sizes, solve


def random_spd(rng, n, lo=0.5, hi=3.0):
    u, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (u * rng.uniform(lo, hi, n)) @ u.T


def random_box(rng, n):
    # every box contains the origin so x = 0 is always feasible
    return BoxIndicator(-rng.uniform(0.5, 2.0, n), rng.uniform(0.5, 2.0, n))


def random_function(rng, n, kinds=("zero", "box", "l1", "sum")):
    kind = kinds[rng.integers(len(kinds))]
    if kind == "zero":
        return Zero(n)
    if kind == "box":
        return random_box(rng, n)
    if kind == "l1":
        return L1Norm(n, rng.uniform(0.1, 1.0))
    return SumConstraintIndicator(n, 0.0)


def random_problem(rng, n=None, q=None):
    """Strongly convex deterministic instance with a unique primal solution."""
    n = int(n or rng.integers(2, 11))
    q = int(q or rng.integers(1, n + 1))
    h_mat = random_spd(rng, n)
    c = 2.0 * rng.standard_normal(n)
    model = DeterministicQuadratic(h_mat, -h_mat @ c)
    return CompositeProblem(
        OracleConfig(model),
        random_function(rng, n, ("zero", "box", "l1")),
        random_function(rng, q),
        LinearMap(rng.standard_normal((q, n))),
    )


def reference_solve(problem, tol=1e-13, max_iters=400_000):
    sig, gam = default_step_sizes(problem)
    cfg = SolverConfig(sig, gam, max_iters=max_iters, stop_residual=tol, record_every=50)
    z, trace = solve(problem, cfg)
    return z, cfg, trace[-1].residual


def random_graph_edges(rng, m):
    """Random connected edge list: a random spanning tree plus a few extra edges."""
    order = rng.permutation(m)
    edges = {tuple(sorted((int(order[i]), int(order[rng.integers(i)])))) for i in range(1, m)}
    for _ in range(int(rng.integers(0, m))):
        i, j = rng.choice(m, 2, replace=False)
        edges.add(tuple(sorted((int(i), int(j)))))
    return sorted(edges)


def random_distributed(rng, m=None, noise=0.0):
    """Random feasible multi-agent instance with default uniform steps."""
    from stripd.distributed import AgentProblem, EdgeConstraint, Graph, with_default_steps
    from stripd.oracle import AdditiveGaussian

    m = int(m or rng.integers(2, 6))
    graph = Graph(m, tuple(random_graph_edges(rng, m)))
    dims = [int(rng.integers(1, 4)) for _ in range(m)]
    anchor = [0.1 * rng.standard_normal(p) for p in dims]
    agents = []
    for p in dims:
        h_mat = random_spd(rng, p)
        model = DeterministicQuadratic(h_mat, -h_mat @ (2.0 * rng.standard_normal(p)))
        if noise:
            model = AdditiveGaussian(model, noise)
        q = int(rng.integers(1, 3))
        agents.append(AgentProblem(
            OracleConfig(model, reference_point=np.zeros(p)),
            random_function(rng, p, ("zero", "box")),
            random_function(rng, q, ("zero", "box", "l1")),
            LinearMap(rng.standard_normal((q, p))),
        ))
    constraints = []
    for i, j in graph.edges:
        rows = int(rng.integers(1, 4))
        a_ij = rng.standard_normal((rows, dims[i]))
        a_ji = rng.standard_normal((rows, dims[j]))
        constraints.append(EdgeConstraint((i, j), a_ij, a_ji, a_ij @ anchor[i] + a_ji @ anchor[j]))
    constraints, agents = with_default_steps(graph, constraints, agents)
    return graph, constraints, agents


def random_block_problem(rng, sizes=((1, 2), (2, 3)), noise=0.0):
    """Block-separable instance: ``sizes[i] = (q_i, p_i)``; returns ``(problem, blocks)``."""
    from scipy.linalg import block_diag

    from stripd.oracle import AdditiveGaussian
    from stripd.prox import SeparableSum

    hs, ls, gs, hfs, blocks = [], [], [], [], []
    ya = xa = 0
    for q, p in sizes:
        hs.append(random_spd(rng, p))
        ls.append(rng.standard_normal((q, p)))
        gs.append(random_function(rng, p, ("zero", "box", "l1")))
        hfs.append(random_function(rng, q, ("zero", "box", "l1")))
        blocks.append(((ya, ya + q), (xa, xa + p)))
        ya, xa = ya + q, xa + p
    h_mat = block_diag(*hs)
    model = DeterministicQuadratic(h_mat, -h_mat @ (2.0 * rng.standard_normal(xa)))
    if noise:
        model = AdditiveGaussian(model, noise)
    problem = CompositeProblem(OracleConfig(model, reference_point=np.zeros(xa)),
                               SeparableSum(tuple(gs)), SeparableSum(tuple(hfs)),
                               LinearMap(block_diag(*ls)))
    return problem, tuple(blocks)
