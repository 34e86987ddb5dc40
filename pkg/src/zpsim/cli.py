"""Command-line front end: config in, traces/plans/reports out."""

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from . import costmodel, planner, scheduler, simulator, taskgraph
from .core import (
    ConfigError,
    ExpertAssignment,
    InfeasibleError,
    Spec,
    ValidationError,
    load_config,
    validate_spec,
    with_run,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INFEASIBLE = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="zpsim", description="Schedule simulator and offload optimizer "
                     "for attention/expert-disaggregated training on mixed GPU fleets.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", required=True, help="JSON config file")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--mode", choices=["zp-theorem", "zp-full"], help="override run.mode")
        p.add_argument("--squeeze", choices=["verbatim", "rederived"], help="override run.squeeze")
        p.add_argument("--gamma", type=float, help="override backward/forward time ratio")
        p.add_argument("--seed", type=int, help="seed for randomized what-if instances")

    p = sub.add_parser("simulate", help="simulate one iteration; emit trace and metrics")
    common(p)
    p.add_argument("--dump-graph", action="store_true", help="also write the task DAG as JSON")

    p = sub.add_parser("optimize", help="compute the expert offload plan")
    common(p)

    p = sub.add_parser("compare", help="rank execution strategies")
    common(p)

    p = sub.add_parser("sweep", help="sweep expert-GPU counts and sequence lengths")
    common(p)
    p.add_argument("--workers", type=int, default=1, help="parallel sweep workers")

    p = sub.add_parser("validate", help="check a config against every invariant")
    common(p, needs_out=False)

    return parser


def _load_spec(args) -> Spec:
    spec = load_config(args.config)
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.squeeze:
        overrides["squeeze"] = args.squeeze
    if args.gamma is not None:
        overrides["gamma"] = Fraction(str(args.gamma))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        spec = with_run(spec, **overrides)
        violations = validate_spec(spec)
        if violations:
            raise ValidationError(violations)
    return spec


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_assignment(spec: Spec, durations):
    """Offload plan for this run: explicit list, optimized, or all zeros."""
    if spec.run.offload is not None:
        return ExpertAssignment(spec.run.offload), None
    if spec.run.asym_ea:
        plan = scheduler.asym_ea_offload(planner.offload_inputs(spec, durations))
        return plan.assignment, plan
    return ExpertAssignment.zeros(spec.model.layers), None


def _write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _cmd_validate(args) -> int:
    try:
        load_config(args.config)
    except ValidationError as exc:
        print("config is invalid:")
        for violation in exc.violations:
            print(f"  - {violation}")
        return EXIT_VALIDATION
    print("config is valid")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args)
    durations = costmodel.derive_task_durations(spec)
    assignment, plan = _resolve_assignment(spec, durations)
    graph = taskgraph.build_zp_graph(spec, durations, assignment=assignment)
    timeline = simulator.simulate(graph, scheduler.default_orders(graph))
    violations = simulator.validate_timeline(graph, timeline)
    if violations:
        print("simulator produced an invalid timeline:", violations, file=sys.stderr)
        return EXIT_VALIDATION

    simulator.export_trace(graph, timeline, out / "trace.json")
    metrics = simulator.compute_metrics(
        graph, timeline, tokens_per_iteration=planner.tokens_per_iteration(spec)
    )
    payload = {
        "mode": graph.mode,
        "offload": list(assignment.offload),
        "iteration_time_ns": metrics.iteration_time,
        "throughput_tokens_per_s": (
            float(metrics.throughput_tokens_per_ns * 1_000_000_000)
            if metrics.throughput_tokens_per_ns is not None
            else None
        ),
        "devices": {
            device: {
                "busy_ns": d.busy,
                "active_window_ns": d.active_window,
                "bubble_ns": d.bubble_total,
                "drain_wait_ns": d.drain_wait,
                "utilization": float(d.utilization),
                "utilization_of_makespan": float(d.utilization_of_makespan),
            }
            for device, d in metrics.devices.items()
        },
    }
    if plan is not None:
        payload["offload_note"] = plan.note
    _write_json(out / "metrics.json", payload)
    if args.dump_graph:
        _write_json(out / "graph.json", taskgraph.graph_to_json(graph))
    print(f"simulated {graph.mode}: makespan {timeline.makespan} ns -> {out}")
    return EXIT_OK


def _cmd_optimize(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args)
    durations = costmodel.derive_task_durations(spec)
    plan = scheduler.asym_ea_offload(planner.offload_inputs(spec, durations))
    _write_json(out / "plan.json", list(plan.assignment.offload))
    report = {
        "offload": list(plan.assignment.offload),
        "chunk": {"per_attention_gpu": plan.chunk[0], "per_expert_gpu": plan.chunk[1]},
        "gather_ns_per_layer": float(plan.t_gather),
        "squeeze_ns_per_chunk": float(plan.t_squeeze),
        "alpha": float(plan.alpha),
        "beta": float(plan.beta),
        "bubble_residual_per_layer": [float(r) for r in plan.residuals],
        "note": plan.note,
    }
    _write_json(out / "bubble_report.json", report)
    if plan.note:
        print(f"offload plan {list(plan.assignment.offload)} ({plan.note}) -> {out}")
    else:
        print(f"offload plan {list(plan.assignment.offload)} -> {out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args)
    results = planner.compare_strategies(spec)
    _write_json(out / "comparison.json", planner.strategy_results_to_json(results))
    width = max(len(r.strategy) for r in results)
    for r in results:
        if r.feasible:
            tput = float(r.throughput * 1_000_000_000)
            line = f"{r.strategy:<{width}}  {r.makespan:>14} ns  {tput:14.3f} tokens/s"
        else:
            line = f"{r.strategy:<{width}}  infeasible: {r.note}"
        print(line)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args)
    cells = planner.sweep_ratios(spec, workers=args.workers)
    _write_json(out / "sweep.json", planner.sweep_to_json(cells))
    planner.sweep_to_csv(cells, out / "sweep.csv")
    print(f"swept {len(cells)} cells -> {out}")
    return EXIT_OK


_COMMANDS = {
    "validate": _cmd_validate,
    "simulate": _cmd_simulate,
    "optimize": _cmd_optimize,
    "compare": _cmd_compare,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as exc:
        print("validation failed:", file=sys.stderr)
        for violation in exc.violations:
            print(f"  - {violation}", file=sys.stderr)
        return EXIT_VALIDATION
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
