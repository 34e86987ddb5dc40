"""Strategy comparison and ZP-group ratio sweeps."""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional, Sequence

from . import costmodel, scheduler, simulator, taskgraph
from .core import (
    ExpertAssignment,
    InfeasibleError,
    Spec,
    TaskDurations,
    ValidationError,
)

STRATEGIES = ("zp", "zp-asym-ea", "distep", "ep", "ep-ideal", "pp")


@dataclass(frozen=True)
class StrategyResult:
    strategy: str
    feasible: bool
    makespan: Optional[int] = None  # ns, one training iteration
    throughput: Optional[Fraction] = None  # tokens per ns
    offload: Optional[tuple] = None
    note: str = ""


@dataclass(frozen=True)
class SweepCell:
    attention_gpus: int
    expert_gpus: int
    seq_len: int
    strategy: str
    feasible: bool
    asym_available: bool
    makespan: Optional[int] = None
    throughput: Optional[Fraction] = None
    offload: Optional[tuple] = None
    note: str = ""


def tokens_per_iteration(spec: Spec) -> int:
    md, cl = spec.model, spec.cluster
    return md.seq_len * md.sequences_per_microbatch * cl.attention_gpus * md.microbatches


def offload_inputs(
    spec: Spec,
    durations: TaskDurations,
    bounds: Optional[costmodel.MemoryBounds] = None,
) -> scheduler.OffloadPlanInputs:
    """Offload-optimizer inputs from derived durations and memory bounds."""
    if bounds is None:
        bounds = costmodel.memory_bounds(spec)
    return scheduler.OffloadPlanInputs(
        experts_per_layer=spec.model.experts_per_layer,
        layers=spec.model.layers,
        attention_gpus=spec.cluster.attention_gpus,
        expert_gpus=spec.cluster.expert_gpus,
        attn_fwd=Fraction(durations.attn_fwd),
        single_expert_on_attn=Fraction(durations.single_expert_fwd_on_attn_gpu),
        expert_layer_on_expert=Fraction(durations.expert_layer_fwd_on_expert_gpu),
        n_min=bounds.n_min,
        n_max=bounds.n_max,
        squeeze_mode=spec.run.squeeze,
    )


def simulate_zp(
    spec: Spec,
    durations: TaskDurations,
    assignment: Optional[ExpertAssignment] = None,
    mode: Optional[str] = None,
    include_backward: bool = True,
):
    """Build, order and run one ZP instance; returns (graph, timeline)."""
    graph = taskgraph.build_zp_graph(
        spec, durations, assignment=assignment, mode=mode, include_backward=include_backward
    )
    timeline = simulator.simulate(graph, scheduler.default_orders(graph))
    violations = simulator.validate_timeline(graph, timeline)
    if violations:  # internal consistency guard; never expected to fire
        raise RuntimeError(f"simulated timeline invalid: {violations}")
    return graph, timeline


def _per_class_shares(spec: Spec, denominator: int):
    """(attention, expert) per-microbatch times for each GPU class when the
    global microbatch is split over `denominator` GPUs."""
    md, cl = spec.model, spec.cluster
    seqs = Fraction(md.sequences_per_microbatch * cl.attention_gpus, denominator)
    tokens = Fraction(costmodel.routed_tokens_per_microbatch(spec), denominator)
    out = []
    for gpu in (cl.attention_class, cl.expert_class):
        attn = costmodel.attention_duration(md.seq_len, seqs, gpu)
        exp = costmodel.round_ns(gpu.expert_coeff * tokens)
        out.append((attn, exp))
    return out


def _needs_coefficients(spec: Spec) -> bool:
    pf = spec.profile
    return pf.attn_durations is not None or pf.expert_durations is not None


def compare_strategies(spec: Spec) -> list:
    """One record per execution strategy, ranked by throughput.

    ZP variants and DistEP are simulated; EP, EP-Ideal and PP use their
    analytic models. Per-strategy infeasibility is recorded, not fatal.
    """
    durations = costmodel.derive_task_durations(spec)
    tokens = tokens_per_iteration(spec)
    gamma = spec.run.gamma
    md, cl = spec.model, spec.cluster
    results = []

    def record_sim(name, timeline, offload=None, note=""):
        results.append(
            StrategyResult(
                strategy=name,
                feasible=True,
                makespan=timeline.makespan,
                throughput=Fraction(tokens, timeline.makespan) if timeline.makespan else None,
                offload=offload,
                note=note,
            )
        )

    _, timeline = simulate_zp(spec, durations, mode="zp-full")
    record_sim("zp", timeline)

    m, n_gpus = cl.attention_gpus, cl.expert_gpus
    if m % n_gpus != 0 and n_gpus % m != 0:
        results.append(
            StrategyResult(
                strategy="zp-asym-ea",
                feasible=False,
                note=f"unavailable: M={m}, N={n_gpus} fail the divisibility requirement",
            )
        )
    else:
        try:
            plan = scheduler.asym_ea_offload(offload_inputs(spec, durations))
            _, timeline = simulate_zp(spec, durations, assignment=plan.assignment, mode="zp-full")
            record_sim("zp-asym-ea", timeline, offload=plan.assignment.offload, note=plan.note)
        except (InfeasibleError, ValidationError) as exc:
            results.append(StrategyResult(strategy="zp-asym-ea", feasible=False, note=str(exc)))

    graph = taskgraph.build_distep_graph(spec, durations)
    timeline = simulator.simulate(graph, scheduler.default_orders(graph))
    violations = simulator.validate_timeline(graph, timeline)
    if violations:
        raise RuntimeError(f"simulated timeline invalid: {violations}")
    record_sim("distep", timeline)

    if _needs_coefficients(spec):
        note = "requires a coefficient profile to model the other GPU class"
        results.append(StrategyResult(strategy="ep", feasible=False, note=note))
        results.append(StrategyResult(strategy="ep-ideal", feasible=False, note=note))
        results.append(StrategyResult(strategy="pp", feasible=False, note=note))
    else:
        ep_time = taskgraph.ep_iteration_time(
            _per_class_shares(spec, m + n_gpus),
            (durations.dispatch, durations.combine),
            md.layers,
            md.microbatches,
            gamma,
        )
        results.append(
            StrategyResult(
                strategy="ep",
                feasible=True,
                makespan=ep_time,
                throughput=Fraction(tokens, ep_time) if ep_time else None,
            )
        )

        pool_times = []
        for gpu, pool in ((cl.attention_class, m), (cl.expert_class, n_gpus)):
            seqs = Fraction(md.sequences_per_microbatch * m, pool)
            tokens_share = Fraction(costmodel.routed_tokens_per_microbatch(spec), pool)
            pool_times.append(
                (
                    costmodel.attention_duration(md.seq_len, seqs, gpu),
                    costmodel.round_ns(gpu.expert_coeff * tokens_share),
                )
            )
        ideal_mb = costmodel.ep_ideal_throughput(pool_times, md.layers) / (1 + gamma)
        tokens_per_mb = Fraction(tokens, md.microbatches)
        ideal_tokens = ideal_mb * tokens_per_mb
        results.append(
            StrategyResult(
                strategy="ep-ideal",
                feasible=True,
                makespan=costmodel.round_ns(Fraction(md.microbatches) / ideal_mb) if ideal_mb else None,
                throughput=ideal_tokens,
                note="analytic upper bound; ignores communication",
            )
        )

        results.append(_pp_result(spec, tokens, gamma))

    ranked = sorted(
        results,
        key=lambda r: (not r.feasible, -(r.throughput or 0)),
    )
    return ranked


def _pp_result(spec: Spec, tokens: int, gamma) -> StrategyResult:
    md, cl = spec.model, spec.cluster
    stages = spec.run.pp_stages or ("attention", "expert")
    classes = {"attention": cl.attention_class, "expert": cl.expert_class}
    non_expert = {
        "attention": spec.profile.non_expert_mem_attention,
        "expert": spec.profile.non_expert_mem_expert,
    }
    seqs = md.sequences_per_microbatch  # one pipeline per attention GPU
    tokens_mb = md.seq_len * seqs

    stage_layer_times = []
    stage_mem = []
    for role in stages:
        gpu = classes[role]
        per_layer = costmodel.attention_duration(md.seq_len, seqs, gpu) + costmodel.round_ns(
            gpu.expert_coeff * tokens_mb * md.top_k
        )
        stage_layer_times.append([per_layer] * md.layers)
        stage_mem.append(gpu.memory_capacity - non_expert[role])
    layer_mem = [
        md.experts_per_layer * md.expert_mem
        + md.activation_mem_per_token * tokens_mb * md.microbatches
    ] * md.layers

    try:
        assignment = taskgraph.pp_assign_layers(
            stage_layer_times, layer_mem, stage_mem, md.microbatches, gamma
        )
    except InfeasibleError as exc:
        return StrategyResult(strategy="pp", feasible=False, note=str(exc))
    return StrategyResult(
        strategy="pp",
        feasible=True,
        makespan=assignment.iteration_time,
        throughput=Fraction(tokens, assignment.iteration_time) if assignment.iteration_time else None,
        note=f"stage layers {assignment.stage_layers}",
    )


# ---------------------------------------------------------------------------
# ratio sweeps


def _scaled_spec(spec: Spec, expert_gpus: int, seq_len: int) -> Spec:
    """Fix M, swap in a new N and sequence length, scaling experts linearly
    with N so even distribution still holds."""
    per_gpu = spec.model.experts_per_layer // spec.cluster.expert_gpus
    cluster = replace(spec.cluster, expert_gpus=expert_gpus)
    model = replace(
        spec.model,
        experts_per_layer=per_gpu * expert_gpus,
        seq_len=seq_len,
        top_k=min(spec.model.top_k, per_gpu * expert_gpus),
    )
    return replace(spec, cluster=cluster, model=model)


def _sweep_cell(args) -> list:
    spec, expert_gpus, seq_len = args
    cell_spec = _scaled_spec(spec, expert_gpus, seq_len)
    m = cell_spec.cluster.attention_gpus
    asym_available = m % expert_gpus == 0 or expert_gpus % m == 0
    tokens = tokens_per_iteration(cell_spec)
    cells = []

    if _needs_coefficients(cell_spec) and seq_len != spec.model.seq_len:
        return [
            SweepCell(
                attention_gpus=m,
                expert_gpus=expert_gpus,
                seq_len=seq_len,
                strategy="zp",
                feasible=False,
                asym_available=asym_available,
                note="sequence-length sweep needs a coefficient profile",
            )
        ]

    durations = costmodel.derive_task_durations(cell_spec)
    _, timeline = simulate_zp(cell_spec, durations, mode="zp-full")
    cells.append(
        SweepCell(
            attention_gpus=m,
            expert_gpus=expert_gpus,
            seq_len=seq_len,
            strategy="zp",
            feasible=True,
            asym_available=asym_available,
            makespan=timeline.makespan,
            throughput=Fraction(tokens, timeline.makespan),
        )
    )

    if not asym_available:
        cells.append(
            SweepCell(
                attention_gpus=m,
                expert_gpus=expert_gpus,
                seq_len=seq_len,
                strategy="zp-asym-ea",
                feasible=False,
                asym_available=False,
                note="divisibility requirement not met; plain ZP still simulated",
            )
        )
        return cells

    try:
        plan = scheduler.asym_ea_offload(offload_inputs(cell_spec, durations))
        _, timeline = simulate_zp(cell_spec, durations, assignment=plan.assignment, mode="zp-full")
        cells.append(
            SweepCell(
                attention_gpus=m,
                expert_gpus=expert_gpus,
                seq_len=seq_len,
                strategy="zp-asym-ea",
                feasible=True,
                asym_available=True,
                makespan=timeline.makespan,
                throughput=Fraction(tokens, timeline.makespan),
                offload=plan.assignment.offload,
                note=plan.note,
            )
        )
    except (InfeasibleError, ValidationError) as exc:
        cells.append(
            SweepCell(
                attention_gpus=m,
                expert_gpus=expert_gpus,
                seq_len=seq_len,
                strategy="zp-asym-ea",
                feasible=False,
                asym_available=True,
                note=str(exc),
            )
        )
    return cells


def sweep_ratios(
    spec: Spec,
    expert_gpu_counts: Optional[Sequence] = None,
    seq_lens: Optional[Sequence] = None,
    workers: int = 1,
) -> list:
    """Simulate every (N, seq_len) cell with and without Asym-EA.

    Cells are independent; results are merged in key order so the outcome
    does not depend on evaluation order or parallelism.
    """
    counts = tuple(expert_gpu_counts or spec.run.sweep_expert_gpu_counts or (spec.cluster.expert_gpus,))
    seqs = tuple(seq_lens or spec.run.sweep_seq_lens or (spec.model.seq_len,))
    if any(c < 1 for c in counts):
        raise ValidationError(["sweep expert GPU counts must be >= 1"])
    jobs = [(spec, n, s) for n in counts for s in seqs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_sweep_cell, jobs))
    else:
        chunks = [_sweep_cell(job) for job in jobs]
    cells = [cell for chunk in chunks for cell in chunk]
    cells.sort(key=lambda c: (c.expert_gpus, c.seq_len, c.strategy))
    return cells


# ---------------------------------------------------------------------------
# report output


def _throughput_tokens_per_s(value: Optional[Fraction]):
    return float(value * 1_000_000_000) if value is not None else None


def strategy_results_to_json(results) -> list:
    return [
        {
            "strategy": r.strategy,
            "feasible": r.feasible,
            "makespan_ns": r.makespan,
            "throughput_tokens_per_s": _throughput_tokens_per_s(r.throughput),
            "offload": list(r.offload) if r.offload is not None else None,
            "note": r.note,
        }
        for r in results
    ]


def sweep_to_json(cells) -> list:
    return [
        {
            "attention_gpus": c.attention_gpus,
            "expert_gpus": c.expert_gpus,
            "seq_len": c.seq_len,
            "strategy": c.strategy,
            "feasible": c.feasible,
            "asym_available": c.asym_available,
            "makespan_ns": c.makespan,
            "throughput_tokens_per_s": _throughput_tokens_per_s(c.throughput),
            "offload": list(c.offload) if c.offload is not None else None,
            "note": c.note,
        }
        for c in cells
    ]


SWEEP_CSV_COLUMNS = [
    "attention_gpus",
    "expert_gpus",
    "seq_len",
    "strategy",
    "feasible",
    "asym_available",
    "makespan_ns",
    "throughput_tokens_per_s",
    "offload",
    "note",
]


def sweep_to_csv(cells, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_CSV_COLUMNS)
        writer.writeheader()
        for row in sweep_to_json(cells):
            row = dict(row)
            row["offload"] = " ".join(str(o) for o in row["offload"]) if row["offload"] else ""
            writer.writerow(row)
