"""Run configuration: a JSON document with ``problem``, ``solver`` and ``oracle`` sections.

Problem kinds are ``dispatch``, ``centralized``, ``block`` and
``distributed``.  Functions, models and schedules are tagged objects, e.g.
``{"type": "box", "lo": [...], "hi": [...]}``.  See the README for the
full schema.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, RejectedInputError
from .metric import LinearMap, SpdOperator
from .oracle import (
    AdditiveGaussian,
    ConstantSchedule,
    DeterministicQuadratic,
    GeometricSchedule,
    HeavyTailAdditive,
    OracleConfig,
    PolynomialSchedule,
    RandomCoefficientQuadratic,
)
from .prox import (
    AffineSetIndicator,
    BoxIndicator,
    L1Norm,
    LinearEqualityIndicator,
    PointIndicator,
    SumConstraintIndicator,
    Zero,
)

PROBLEM_KINDS = ("dispatch", "centralized", "block", "distributed")


@dataclass
class SolverParams:
    sigma: float | list | None = None  # scalar, diagonal, or None for defaults
    gamma: float | list | None = None
    max_iters: int = 2000
    stop_residual: float = 0.0
    record_every: int = 1
    safety: float = 0.9


@dataclass
class OracleParams:
    schedule: dict = field(default_factory=lambda: {"type": "polynomial", "n0": 1, "exponent": 1.2})
    sigma0: float | None = None
    sigma1: float | None = None
    q_std: float | list | None = None  # dispatch only; default 0.1 * q_mean
    allow_constant: bool = False


@dataclass
class RunConfig:
    problem: dict
    solver: SolverParams = field(default_factory=SolverParams)
    oracle: OracleParams = field(default_factory=OracleParams)
    trials: int = 1
    master_seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if not isinstance(self.problem, dict) or self.problem.get("kind") not in PROBLEM_KINDS:
            raise ConfigurationError(f"problem.kind must be one of {PROBLEM_KINDS}")
        if isinstance(self.solver, dict):
            self.solver = SolverParams(**self.solver)
        if isinstance(self.oracle, dict):
            self.oracle = OracleParams(**self.oracle)
        if not (isinstance(self.trials, int) and self.trials >= 1):
            raise ConfigurationError("trials must be a positive integer")
        if not (isinstance(self.master_seed, int) and 0 <= self.master_seed < 2**64):
            raise ConfigurationError("master_seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(d) - {"problem", "solver", "oracle", "trials", "master_seed", "output_dir"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def loads(cls, text: str) -> RunConfig:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config: {exc}") from exc
        return cls.loads(text)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _get(d, key, kind):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise ConfigurationError(f"{kind} is missing '{key}'") from None


def build_schedule(d: dict):
    kind = _get(d, "type", "schedule")
    args = {k: v for k, v in d.items() if k != "type"}
    table = {"polynomial": PolynomialSchedule, "geometric": GeometricSchedule,
             "constant": ConstantSchedule}
    if kind not in table:
        raise ConfigurationError(f"unknown schedule type {kind!r}")
    try:
        return table[kind](**args)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def build_model(d: dict):
    kind = _get(d, "type", "model")
    try:
        if kind == "deterministic_quadratic":
            return DeterministicQuadratic(np.asarray(d["h"], dtype=float), d["linear"])
        if kind == "random_coefficient_quadratic":
            return RandomCoefficientQuadratic(d["q_mean"], d["q_std"], d["p"])
        if kind == "additive_gaussian":
            return AdditiveGaussian(build_model(d["base"]), float(d["noise_std"]))
        if kind == "heavy_tail":
            return HeavyTailAdditive(build_model(d["base"]), float(d.get("tail_index", 2.5)),
                                     float(d.get("scale", 1.0)))
    except KeyError as exc:
        raise ConfigurationError(f"model {kind!r} is missing {exc}") from None
    raise ConfigurationError(f"unknown model type {kind!r}")


def build_function(d: dict):
    kind = _get(d, "type", "function")
    try:
        if kind == "zero":
            return Zero(int(d["dim"]))
        if kind == "box":
            return BoxIndicator(d["lo"], d["hi"])
        if kind == "point":
            return PointIndicator(d["c"])
        if kind == "affine":
            return AffineSetIndicator(d["normal"], d["offset"])
        if kind == "sum":
            return SumConstraintIndicator(int(d["dim"]), d["target"])
        if kind == "l1":
            return L1Norm(int(d["dim"]), d.get("weight", 1.0))
        if kind == "linear_equality":
            return LinearEqualityIndicator(d["a"], d["b"])
    except KeyError as exc:
        raise ConfigurationError(f"function {kind!r} is missing {exc}") from None
    raise ConfigurationError(f"unknown function type {kind!r}")


def build_oracle(model, params: OracleParams, reference_point=None) -> OracleConfig:
    return OracleConfig(model, build_schedule(params.schedule), params.sigma0, params.sigma1,
                        reference_point, params.allow_constant)


def build_operator(value, dim: int) -> SpdOperator | None:
    """Scalar or diagonal preconditioner from a config value; ``None`` passes through."""
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return SpdOperator.scalar(float(value), dim)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.size == dim:
        return SpdOperator.diagonal(arr)
    if arr.ndim == 2 and arr.shape == (dim, dim):
        return SpdOperator.from_matrix(arr)
    raise RejectedInputError(f"preconditioner does not match dimension {dim}")


def build_centralized(problem: dict, oracle: OracleParams):
    from .solver import CompositeProblem

    l = LinearMap(np.asarray(_get(problem, "l", "problem"), dtype=float))
    q = problem.get("q_metric")
    return CompositeProblem(
        smooth=build_oracle(build_model(_get(problem, "smooth", "problem")), oracle,
                            problem.get("reference_point")),
        g=build_function(_get(problem, "g", "problem")),
        h=build_function(_get(problem, "h", "problem")),
        l=l,
        q_metric=None if q is None else build_operator(q, l.cols),
    )


def build_distributed(problem: dict, oracle: OracleParams):
    """Return ``(graph, constraints, agents)``; missing steps get the uniform defaults."""
    from .distributed import AgentProblem, EdgeConstraint, Graph, with_default_steps

    gd = _get(problem, "graph", "problem")
    graph = Graph(int(_get(gd, "num_agents", "graph")), tuple(tuple(e) for e in gd.get("edges", [])))
    constraints = [
        EdgeConstraint(tuple(_get(c, "edge", "constraint")), _get(c, "a_ij", "constraint"),
                       _get(c, "a_ji", "constraint"), _get(c, "b", "constraint"),
                       float(c.get("tau", 1.0)))
        for c in problem.get("constraints", [])
    ]
    agents = [
        AgentProblem(build_oracle(build_model(_get(a, "smooth", "agent")), oracle),
                     build_function(_get(a, "g", "agent")), build_function(_get(a, "h", "agent")),
                     LinearMap(np.asarray(_get(a, "l", "agent"), dtype=float)),
                     float(a.get("sigma", 1.0)), float(a.get("gamma", 1.0)))
        for a in _get(problem, "agents", "problem")
    ]
    if not problem.get("explicit_steps", False):
        constraints, agents = with_default_steps(graph, constraints, agents)
    return graph, constraints, agents


def build_partition(problem: dict):
    from .block import BlockPartition

    pd = _get(problem, "partition", "problem")
    return BlockPartition(tuple(tuple(b) for b in _get(pd, "blocks", "partition")),
                          tuple(_get(pd, "probs", "partition")), pd.get("mode", "multi"))
