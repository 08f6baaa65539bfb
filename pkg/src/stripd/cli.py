"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 step-size validation
failure, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, build_centralized, build_distributed, build_operator, build_partition
from .dispatch import (
    BUILTIN_INSTANCE,
    DispatchInstance,
    dispatch_reference,
    dispatch_setup,
    default_run_config,
    run_benchmark,
)
from .errors import ConfigurationError, DivergenceError, RejectedInputError, StepSizeError
from .solver import SolverConfig, default_step_sizes, fixed_point_residual, solve, validate_step_sizes

EXIT_OK, EXIT_CONFIG, EXIT_STEP, EXIT_DIVERGED = 0, 2, 3, 4


def _centralized_setup(cfg: RunConfig, seed=None, iters=None):
    problem = build_centralized(cfg.problem, cfg.oracle)
    sp = cfg.solver
    sig = build_operator(sp.sigma, problem.n_dual)
    gam = build_operator(sp.gamma, problem.n_primal)
    if sig is None or gam is None:
        d_sig, d_gam = default_step_sizes(problem, sp.safety)
        sig, gam = sig or d_sig, gam or d_gam
    solver = SolverConfig(sig, gam, max_iters=sp.max_iters if iters is None else iters,
                          seed=cfg.master_seed if seed is None else seed,
                          stop_residual=sp.stop_residual, record_every=sp.record_every)
    return problem, solver


def _print_report(label, report):
    print(f"{label}satisfied={report.satisfied} margin={report.margin!r} "
          f"lambda_min(2U-S)={report.lambda_min_2U_minus_S!r}")


def cmd_validate(args) -> int:
    cfg = RunConfig.load(args.config)
    kind = cfg.problem["kind"]
    if kind == "distributed":
        from .distributed import validate_distributed

        reports = [validate_distributed(*build_distributed(cfg.problem, cfg.oracle))]
    elif kind == "dispatch":
        setup = dispatch_setup(cfg)
        reports = [validate_step_sizes(setup.problem, setup.solver)]
    else:
        problem, solver = _centralized_setup(cfg)
        reports = [validate_step_sizes(problem, solver)]
        if kind == "block":
            from .block import validate_blocks

            reports += validate_blocks(problem, solver, build_partition(cfg.problem))
    for i, r in enumerate(reports):
        _print_report("" if len(reports) == 1 else f"[{'global' if i == 0 else f'block {i - 1}'}] ", r)
    if all(r.satisfied for r in reports):
        return EXIT_OK
    worst = min(r.margin for r in reports)
    print(f"step condition violated: margin {worst!r}", file=sys.stderr)
    return EXIT_STEP


def _write_residual_trace(out: Path, traces: list, extra: dict):
    """Aggregate per-trial ``{iter: residual}`` series into the long CSV."""
    iters = sorted(set.intersection(*(set(t) for t in traces)))
    lines = ["iter,metric,min,mean,max"]
    for k in iters:
        vals = np.array([t[k] for t in traces])
        lines.append(f"{k},residual,{float(vals.min())!r},{float(vals.mean())!r},{float(vals.max())!r}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_text("\n".join(lines) + "\n")
    (out / "meta.json").write_text(json.dumps(extra, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.iters is not None:
        cfg = replace(cfg, solver=replace(cfg.solver, max_iters=args.iters))
    out = Path(args.out or cfg.output_dir)
    kind = cfg.problem["kind"]
    if kind == "dispatch":
        summary, _ = run_benchmark(cfg, out, force=args.force)
        last = {name: float(summary.stats[name][1][-1]) for name in summary.stats}
        print(" ".join(f"{k}={v!r}" for k, v in last.items()))
        print(f"wrote {out / 'trace.csv'}")
        return EXIT_OK
    traces, finals = [], []
    if kind == "distributed":
        from .distributed import run_distributed, stack_problem, validate_distributed

        graph, constraints, agents = build_distributed(cfg.problem, cfg.oracle)
        report = validate_distributed(graph, constraints, agents)
        if not report.satisfied and not args.force:
            raise StepSizeError(f"step condition violated (margin {report.margin:.6g})", report)
        stacked = stack_problem(graph, constraints, agents)
        scfg = stacked.solver_config()
        for t in range(cfg.trials):
            series = {}

            def record(k, states):
                if k % cfg.solver.record_every == 0:
                    series[k] = fixed_point_residual(stacked.problem, scfg, stacked.to_state(states))

            states = run_distributed(graph, constraints, agents, cfg.solver.max_iters,
                                     seed=cfg.master_seed, trial=t, callback=record)
            traces.append(series)
            finals.append([s.x.tolist() for s in states])
    else:
        problem, solver = _centralized_setup(cfg)
        partition = build_partition(cfg.problem) if kind == "block" else None
        for t in range(cfg.trials):
            tcfg = replace(solver, trial=t)
            if partition is None:
                z, trace = solve(problem, tcfg, override=args.force)
                traces.append({r.k: r.residual for r in trace})
            else:
                from .block import block_solve

                z, recs = block_solve(problem, tcfg, partition, override=args.force,
                                      dual_in_primal=cfg.problem.get("dual_in_primal", "hat"))
                traces.append({r.k: fixed_point_residual(problem, tcfg, z) for r in recs[-1:]})
            finals.append(z.x.tolist())
    _write_residual_trace(out, traces, {"config": cfg.to_dict(), "final_x": finals})
    print(f"wrote {out / 'trace.csv'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.config:
        cfg = RunConfig.load(args.config)
        if cfg.problem["kind"] != "dispatch":
            raise ConfigurationError("bench dispatch needs a dispatch config")
        cfg = replace(cfg, trials=args.trials or cfg.trials,
                      master_seed=cfg.master_seed if args.seed is None else args.seed)
        if args.iters is not None:
            cfg = replace(cfg, solver=replace(cfg.solver, max_iters=args.iters))
    else:
        cfg = default_run_config(trials=args.trials or 100, seed=7 if args.seed is None else args.seed,
                               iters=2000 if args.iters is None else args.iters)
    out = Path(args.out or cfg.output_dir)
    summary, meta = run_benchmark(cfg, out, workers=args.workers)
    for name in summary.stats:
        first, last = float(summary.stats[name][1][0]), float(summary.stats[name][1][-1])
        print(f"{name}: mean {first!r} -> {last!r}")
    print(f"wrote {out / 'trace.csv'} and {out / 'meta.json'}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.config and not args.paper_instance:
        cfg = RunConfig.load(args.config)
        inst = cfg.problem.get("instance")
        instance = BUILTIN_INSTANCE if inst in (None, "builtin") else DispatchInstance.from_dict(inst)
    else:
        instance = BUILTIN_INSTANCE
    x, lam, cost = dispatch_reference(instance)
    print("x* = " + " ".join(f"{v:.12f}" for v in x))
    print(f"lambda* = {lam:.12f}")
    print(f"cost* = {cost:.12f}")
    print(f"sum x* = {float(np.sum(x)):.12f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stripd", description="Stochastic primal-dual solver")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check the step-size condition for a config")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="solve the problem described by a config")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true", help="run even if the step condition fails")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="multi-trial benchmarks")
    bench = p.add_subparsers(dest="bench", required=True)
    b = bench.add_parser("dispatch", help="economic dispatch benchmark")
    b.add_argument("--trials", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--iters", type=int)
    b.add_argument("--out")
    b.add_argument("--workers", type=int, help="parallel trials (default: $STRIPD_WORKERS or CPU count)")
    b.add_argument("--paper-instance", action="store_true", help="use the built-in 5-generator instance")
    b.add_argument("--config", help="dispatch config to use instead of the built-in instance")
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="reference solutions")
    orc = p.add_subparsers(dest="oracle", required=True)
    o = orc.add_parser("dispatch", help="dispatch optimum by multiplier bisection")
    o.add_argument("config", nargs="?")
    o.add_argument("--paper-instance", action="store_true")
    o.set_defaults(func=cmd_oracle)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except StepSizeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STEP
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, RejectedInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
