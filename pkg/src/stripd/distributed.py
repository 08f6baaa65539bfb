"""Multi-agent problems over a graph with edge-coupled affine constraints.

Agent ``i`` owns ``f_i + g_i + h_i(L_i x_i)``; every edge ``(i, j)`` imposes
``A_ij x_i + A_ji x_j = b_ij``.  Each endpoint keeps its own copy of the edge
multiplier.  :func:`distributed_step` runs one synchronous round in which
agents read only their own state and their neighbours' state from the
previous round.  :func:`stack_problem` builds the equivalent centralized
problem so the same iteration can be run through :mod:`stripd.solver`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, RejectedInputError
from .metric import LinearMap, SpdOperator
from .oracle import OracleConfig, SeparableModel, minibatch_gradient
from .prox import LinearEqualityIndicator, ProximableFunction, SeparableSum, prox, prox_conjugate
from .rng import CounterStream
from .solver import (
    CompositeProblem,
    PrimalDualState,
    SolverConfig,
    default_step_sizes,
    stripd_step,
    validate_step_sizes,
)


@dataclass(frozen=True)
class Graph:
    num_agents: int
    edges: tuple

    def __post_init__(self):
        if self.num_agents < 1:
            raise ConfigurationError("graph needs at least one agent")
        seen = set()
        edges = []
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ConfigurationError(f"self-loop at agent {i}")
            if not (0 <= i < self.num_agents and 0 <= j < self.num_agents):
                raise ConfigurationError(f"edge ({i}, {j}) references a missing agent")
            key = frozenset((i, j))
            if key in seen:
                raise ConfigurationError(f"duplicate edge ({i}, {j})")
            seen.add(key)
            edges.append((i, j))
        object.__setattr__(self, "edges", tuple(edges))
        if not self._connected():
            raise ConfigurationError("graph is not connected")

    def _connected(self):
        adj = self.adjacency
        seen, todo = {0}, deque([0])
        while todo:
            for j in adj[todo.popleft()]:
                if j not in seen:
                    seen.add(j)
                    todo.append(j)
        return len(seen) == self.num_agents

    @cached_property
    def adjacency(self) -> tuple:
        adj = [[] for _ in range(self.num_agents)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)

    def neighbors(self, i: int) -> tuple:
        return self.adjacency[i]

    def incident(self, i: int) -> tuple:
        return tuple(e for e in self.edges if i in e)


@dataclass(frozen=True, eq=False)
class EdgeConstraint:
    """``a_ij x_i + a_ji x_j = b`` on edge ``(i, j)`` with edge step ``tau``."""

    edge: tuple
    a_ij: np.ndarray
    a_ji: np.ndarray
    b: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        a_ij = np.atleast_2d(np.asarray(self.a_ij, dtype=float))
        a_ji = np.atleast_2d(np.asarray(self.a_ji, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if not (a_ij.shape[0] == a_ji.shape[0] == b.size) or b.size == 0:
            raise RejectedInputError("edge matrices and b disagree in row count")
        if not self.tau > 0:
            raise RejectedInputError("tau must be positive")
        object.__setattr__(self, "edge", (int(self.edge[0]), int(self.edge[1])))
        object.__setattr__(self, "a_ij", a_ij)
        object.__setattr__(self, "a_ji", a_ji)
        object.__setattr__(self, "b", b)

    @property
    def rows(self) -> int:
        return self.b.size

    def matrix_for(self, agent: int) -> np.ndarray:
        return self.a_ij if agent == self.edge[0] else self.a_ji

    def residual(self, x_i, x_j) -> np.ndarray:
        return self.a_ij @ x_i + self.a_ji @ x_j - self.b


@dataclass(frozen=True, eq=False)
class AgentProblem:
    smooth: OracleConfig
    g: ProximableFunction
    h: ProximableFunction
    l: LinearMap
    sigma: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        p = self.smooth.model.dim
        if self.g.dim != p or self.l.cols != p or self.h.dim != self.l.rows:
            raise RejectedInputError("agent dimensions are inconsistent")
        if not (self.sigma > 0 and self.gamma > 0):
            raise RejectedInputError("agent step sizes must be positive")

    @property
    def beta(self) -> float:
        return self.smooth.model.beta_f

    @property
    def p(self) -> int:
        return self.l.cols

    @property
    def q(self) -> int:
        return self.l.rows

    @cached_property
    def _dual_metric(self):
        return SpdOperator.scalar(1.0 / self.sigma, self.q)

    @cached_property
    def _primal_metric(self):
        return SpdOperator.scalar(1.0 / self.gamma, self.p)


@dataclass
class AgentState:
    x: np.ndarray
    v: np.ndarray
    w: dict = field(default_factory=dict)


def _constraint_map(graph, constraints):
    by_edge = {}
    for c in constraints:
        by_edge[c.edge] = c
    if set(by_edge) != set(graph.edges) or len(constraints) != len(graph.edges):
        raise RejectedInputError("constraints must match the graph edges one-to-one")
    return by_edge


def _check_agents(graph, by_edge, agents):
    if len(agents) != graph.num_agents:
        raise RejectedInputError("one AgentProblem per agent is required")
    for e, c in by_edge.items():
        i, j = e
        if c.a_ij.shape[1] != agents[i].p or c.a_ji.shape[1] != agents[j].p:
            raise RejectedInputError(f"edge {e} matrices do not match agent dimensions")


def initial_states(graph: Graph, constraints, agents) -> list:
    by_edge = _constraint_map(graph, constraints)
    return [
        AgentState(np.zeros(a.p), np.zeros(a.q),
                   {e: np.zeros(by_edge[e].rows) for e in graph.incident(i)})
        for i, a in enumerate(agents)
    ]


def agent_update(i: int, graph: Graph, by_edge: dict, agents, states, k: int,
                 rng: CounterStream) -> AgentState:
    """Round-``k`` update of agent ``i`` from the round-``k`` snapshot ``states``."""
    agent = agents[i]
    me = states[i]
    x = me.x
    w_bar = {}
    pull = np.zeros_like(x)
    for e in graph.incident(i):
        c = by_edge[e]
        j = e[1] if e[0] == i else e[0]
        other = states[j]
        x_a, x_b = (x, other.x) if e[0] == i else (other.x, x)
        wb = 0.5 * (me.w[e] + other.w[e]) + 0.5 * c.tau * c.residual(x_a, x_b)
        w_bar[e] = wb
        pull += c.matrix_for(i).T @ wb
    v_bar = prox_conjugate(agent.h, agent._dual_metric, me.v + agent.sigma * agent.l.apply(x))
    grad, _ = minibatch_gradient(agent.smooth, x, k, rng.child(i))
    step = x - agent.gamma * grad - agent.gamma * agent.l.adjoint(v_bar) - agent.gamma * pull
    x_new = prox(agent.g, agent._primal_metric, step)
    dx = x_new - x
    v_new = v_bar + agent.sigma * agent.l.apply(dx)
    w_new = {e: wb + by_edge[e].tau * (by_edge[e].matrix_for(i) @ dx) for e, wb in w_bar.items()}
    return AgentState(x_new, v_new, w_new)


def distributed_step(graph: Graph, constraints, agents, states, k: int, rng: CounterStream) -> list:
    """One synchronous round; ``states`` is read-only and a new list is returned."""
    by_edge = _constraint_map(graph, constraints)
    _check_agents(graph, by_edge, agents)
    if len(states) != graph.num_agents:
        raise RejectedInputError("one AgentState per agent is required")
    return [agent_update(i, graph, by_edge, agents, states, k, rng) for i in range(graph.num_agents)]


@dataclass(frozen=True, eq=False)
class StackedProblem:
    """Centralized form of a multi-agent problem plus its index maps.

    Dual coordinates are ordered ``v_1..v_m`` followed, per edge, by the two
    copies ``w^i, w^j``.
    """

    problem: CompositeProblem
    sigma: SpdOperator
    gamma: SpdOperator
    x_ranges: tuple
    v_ranges: tuple
    w_ranges: dict

    def to_state(self, states) -> PrimalDualState:
        y = np.zeros(self.problem.n_dual)
        x = np.zeros(self.problem.n_primal)
        for i, st in enumerate(states):
            a, b = self.x_ranges[i]
            x[a:b] = st.x
            a, b = self.v_ranges[i]
            y[a:b] = st.v
        for e, ((a1, b1), (a2, b2)) in self.w_ranges.items():
            y[a1:b1] = states[e[0]].w[e]
            y[a2:b2] = states[e[1]].w[e]
        return PrimalDualState(y, x)

    def to_agents(self, z: PrimalDualState) -> list:
        out = []
        for i, ((xa, xb), (va, vb)) in enumerate(zip(self.x_ranges, self.v_ranges)):
            out.append(AgentState(z.x[xa:xb].copy(), z.y[va:vb].copy(), {}))
        for e, ((a1, b1), (a2, b2)) in self.w_ranges.items():
            out[e[0]].w[e] = z.y[a1:b1].copy()
            out[e[1]].w[e] = z.y[a2:b2].copy()
        return out

    def solver_config(self, **kwargs) -> SolverConfig:
        return SolverConfig(self.sigma, self.gamma, **kwargs)


def stack_problem(graph: Graph, constraints, agents) -> StackedProblem:
    by_edge = _constraint_map(graph, constraints)
    _check_agents(graph, by_edge, agents)
    schedules = {type(a.smooth.schedule).__name__ + repr(a.smooth.schedule) for a in agents}
    if len(schedules) != 1:
        raise ConfigurationError("all agents must share one batch schedule")
    x_bounds = np.cumsum([0] + [a.p for a in agents]).tolist()
    x_ranges = tuple(zip(x_bounds[:-1], x_bounds[1:]))
    pos = 0
    v_ranges = []
    for a in agents:
        v_ranges.append((pos, pos + a.q))
        pos += a.q
    w_ranges = {}
    for e in graph.edges:
        l_e = by_edge[e].rows
        w_ranges[e] = ((pos, pos + l_e), (pos + l_e, pos + 2 * l_e))
        pos += 2 * l_e
    n_dual, n_primal = pos, x_bounds[-1]

    d = np.zeros((n_dual, n_primal))
    sig_diag = np.zeros(n_dual)
    for i, a in enumerate(agents):
        (va, vb), (xa, xb) = v_ranges[i], x_ranges[i]
        d[va:vb, xa:xb] = a.l.entries
        sig_diag[va:vb] = a.sigma
    h_parts = [a.h for a in agents]
    for e in graph.edges:
        c = by_edge[e]
        (a1, b1), (a2, b2) = w_ranges[e]
        i, j = e
        d[a1:b1, x_ranges[i][0]:x_ranges[i][1]] = c.a_ij
        d[a2:b2, x_ranges[j][0]:x_ranges[j][1]] = c.a_ji
        sig_diag[a1:b2] = c.tau
        eye = np.eye(c.rows)
        h_parts.append(LinearEqualityIndicator(np.hstack([eye, eye]), c.b))

    gam_diag = np.concatenate([np.full(a.p, a.gamma) for a in agents])
    s0 = [a.smooth.sigma0 for a in agents]
    s1 = [a.smooth.sigma1 for a in agents]
    smooth = OracleConfig(
        SeparableModel(tuple(a.smooth.model for a in agents)),
        schedule=agents[0].smooth.schedule,
        sigma0=None if None in s0 else float(sum(s0)),
        sigma1=None if None in s1 else float(max(s1)),
        allow_constant=any(a.smooth.allow_constant for a in agents),
    )
    problem = CompositeProblem(
        smooth=smooth,
        g=SeparableSum(tuple(a.g for a in agents)),
        h=SeparableSum(tuple(h_parts)),
        l=LinearMap(d),
    )
    return StackedProblem(problem, SpdOperator.diagonal(sig_diag), SpdOperator.diagonal(gam_diag),
                          x_ranges, tuple(v_ranges), w_ranges)


def with_default_steps(graph: Graph, constraints, agents, safety: float = 0.9):
    """Uniform steps from the stacked problem: ``sigma_i = tau_ij = sigma``, ``gamma_i = gamma``."""
    stacked = stack_problem(graph, constraints, agents)
    sig, gam = default_step_sizes(stacked.problem, safety)
    s, g = sig.eig_max, gam.eig_max
    return ([replace(c, tau=s) for c in constraints],
            [replace(a, sigma=s, gamma=g) for a in agents])


def validate_distributed(graph: Graph, constraints, agents):
    stacked = stack_problem(graph, constraints, agents)
    return validate_step_sizes(stacked.problem, stacked.solver_config())


def edge_violation(graph: Graph, constraints, states) -> float:
    by_edge = _constraint_map(graph, constraints)
    worst = 0.0
    for (i, j), c in by_edge.items():
        worst = max(worst, float(np.linalg.norm(c.residual(states[i].x, states[j].x))))
    return worst


def run_distributed(graph: Graph, constraints, agents, iters: int, seed: int = 0, trial: int = 0,
                    states=None, callback=None):
    """Iterate :func:`distributed_step`; ``callback(k, states)`` sees each round's input."""
    rng = CounterStream(seed, (trial,))
    states = initial_states(graph, constraints, agents) if states is None else states
    for k in range(iters):
        if callback is not None:
            callback(k, states)
        states = distributed_step(graph, constraints, agents, states, k, rng)
    return states


def equivalence_check(graph: Graph, constraints, agents, z0=None, iters: int = 100,
                      seed: int = 0) -> float:
    """Max absolute gap between per-agent and stacked trajectories over ``iters`` rounds."""
    stacked = stack_problem(graph, constraints, agents)
    cfg = stacked.solver_config(max_iters=iters, seed=seed)
    states = stacked.to_agents(z0) if z0 is not None else initial_states(graph, constraints, agents)
    z = stacked.to_state(states)
    rng = cfg.stream
    worst = 0.0
    for k in range(iters):
        states = distributed_step(graph, constraints, agents, states, k, rng)
        z = stripd_step(stacked.problem, cfg, z, k, rng, diagnose=False)[0]
        other = stacked.to_state(states)
        worst = max(worst, float(np.max(np.abs(other.y - z.y), initial=0.0)),
                    float(np.max(np.abs(other.x - z.x))))
    return worst
