"""Stream orders, offload optimization, and brute-force search oracles.

A StreamOrder maps each (device, stream) lane to the task ids executed on it,
in order. Compute lanes follow the layer-zigzag schedule; comm lanes receive
each transfer as soon as its producer is scheduled.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import product
from typing import Callable, Optional

from .core import ExpertAssignment, InfeasibleError, ValidationError, as_fraction
from .taskgraph import (
    ATTN_DEVICE,
    COMBINE,
    COMPUTE,
    DISPATCH,
    EXP_DEVICE,
    OFFLOAD_KINDS,
    TaskGraph,
    TaskKind,
)

ATTN_LANE = (ATTN_DEVICE, COMPUTE)
EXP_LANE = (EXP_DEVICE, COMPUTE)
DISP_LANE = (ATTN_DEVICE, DISPATCH)
COMB_LANE = (EXP_DEVICE, COMBINE)


class SearchBoundExceeded(Exception):
    """Brute-force search space is larger than the configured bound."""


def chunk_sizes(attention_gpus: int, expert_gpus: int):
    """Minimal offload unit: n_1 acquired per attention GPU, n_2 offloaded
    per expert GPU. Requires M | N or N | M so both are integers."""
    m, n = attention_gpus, expert_gpus
    if m < 1 or n < 1 or (m % n != 0 and n % m != 0):
        raise ValidationError([f"chunk sizes need M % N == 0 or N % M == 0, got M={m}, N={n}"])
    n1 = max(1, n // m)
    n2 = n1 * m // n
    return n1, n2


# ---------------------------------------------------------------------------
# stream orders


def zp_compute_order(graph: TaskGraph) -> dict:
    """Compute-lane orders for a ZP graph.

    Attention lane: forward layer blocks microbatch-major, layer-L forward/
    backward interleaved per microbatch, then backward blocks in reverse
    layer order. Offloaded-expert tasks of a layer run after all R attention
    tasks of that layer (mirrored on the backward side). Expert lane:
    forward layers ascending then backward descending, microbatch-major.
    """
    if graph.mode not in ("zp-theorem", "zp-full"):
        raise ValueError(f"zp_compute_order needs a ZP graph, got mode {graph.mode!r}")
    layers, mbs = graph.layers, graph.microbatches
    backward = not graph.forward_only

    attn = []
    for l in range(1, layers):
        attn.extend(graph.task(TaskKind.ATTN_F, l, j).id for j in range(1, mbs + 1))
        attn.extend(
            graph.task(TaskKind.OFF_EXP_F, l, j).id
            for j in range(1, mbs + 1)
            if graph.has(TaskKind.OFF_EXP_F, l, j)
        )
    if backward:
        for j in range(1, mbs + 1):
            attn.append(graph.task(TaskKind.ATTN_F, layers, j).id)
            if graph.has(TaskKind.OFF_EXP_F, layers, j):
                attn.append(graph.task(TaskKind.OFF_EXP_F, layers, j).id)
                attn.append(graph.task(TaskKind.OFF_EXP_B, layers, j).id)
            attn.append(graph.task(TaskKind.ATTN_B, layers, j).id)
        for l in range(layers - 1, 0, -1):
            attn.extend(
                graph.task(TaskKind.OFF_EXP_B, l, j).id
                for j in range(1, mbs + 1)
                if graph.has(TaskKind.OFF_EXP_B, l, j)
            )
            attn.extend(graph.task(TaskKind.ATTN_B, l, j).id for j in range(1, mbs + 1))
    else:
        attn.extend(graph.task(TaskKind.ATTN_F, layers, j).id for j in range(1, mbs + 1))
        attn.extend(
            graph.task(TaskKind.OFF_EXP_F, layers, j).id
            for j in range(1, mbs + 1)
            if graph.has(TaskKind.OFF_EXP_F, layers, j)
        )

    exp = []
    for l in range(1, layers):
        exp.extend(graph.task(TaskKind.EXP_F, l, j).id for j in range(1, mbs + 1))
    if graph.has(TaskKind.EXP_F, layers, 1):  # zp-full: layer-L experts exist
        for j in range(1, mbs + 1):
            exp.append(graph.task(TaskKind.EXP_F, layers, j).id)
            if backward:
                exp.append(graph.task(TaskKind.EXP_B, layers, j).id)
    if backward:
        for l in range(layers - 1, 0, -1):
            exp.extend(graph.task(TaskKind.EXP_B, l, j).id for j in range(1, mbs + 1))

    return {ATTN_LANE: attn, EXP_LANE: exp}


def comm_order(graph: TaskGraph, compute_order: dict) -> dict:
    """Comm-lane orders: transfers follow their producers' compute positions.

    Dispatch producers live on the attention lane (AttnF for DispF; the next
    layer's AttnB for DispB, or the layer's own AttnF at the loss turnaround);
    combine producers are the expert tasks.
    """
    attn_pos = {tid: i for i, tid in enumerate(compute_order.get(ATTN_LANE, []))}
    exp_pos = {tid: i for i, tid in enumerate(compute_order.get(EXP_LANE, []))}
    layers = graph.layers

    disp, comb = [], []
    for t in graph.tasks:
        if t.kind == TaskKind.DISP_F:
            key = (attn_pos[graph.task(TaskKind.ATTN_F, t.layer, t.microbatch).id], 0, t.id)
            disp.append((key, t.id))
        elif t.kind == TaskKind.DISP_B:
            if t.layer < layers:
                producer = graph.task(TaskKind.ATTN_B, t.layer + 1, t.microbatch).id
            else:
                producer = graph.task(TaskKind.ATTN_F, layers, t.microbatch).id
            disp.append(((attn_pos[producer], 1, t.id), t.id))
        elif t.kind == TaskKind.COMB_F:
            comb.append(((exp_pos[graph.task(TaskKind.EXP_F, t.layer, t.microbatch).id], 0, t.id), t.id))
        elif t.kind == TaskKind.COMB_B:
            comb.append(((exp_pos[graph.task(TaskKind.EXP_B, t.layer, t.microbatch).id], 0, t.id), t.id))

    return {
        DISP_LANE: [tid for _, tid in sorted(disp)],
        COMB_LANE: [tid for _, tid in sorted(comb)],
    }


def distep_orders(graph: TaskGraph) -> dict:
    """Lockstep orders for a DistEP graph: strictly layer- then microbatch-serial."""
    layers, mbs = graph.layers, graph.microbatches
    backward = not graph.forward_only

    def fwd(kind):
        return [graph.task(kind, l, j).id for l in range(1, layers + 1) for j in range(1, mbs + 1)]

    def bwd(kind):
        return [graph.task(kind, l, j).id for l in range(layers, 0, -1) for j in range(1, mbs + 1)]

    orders = {
        ATTN_LANE: fwd(TaskKind.ATTN_F) + (bwd(TaskKind.ATTN_B) if backward else []),
        EXP_LANE: fwd(TaskKind.EXP_F) + (bwd(TaskKind.EXP_B) if backward else []),
        DISP_LANE: fwd(TaskKind.DISP_F) + (bwd(TaskKind.DISP_B) if backward else []),
        COMB_LANE: fwd(TaskKind.COMB_F) + (bwd(TaskKind.COMB_B) if backward else []),
    }
    return orders


def default_orders(graph: TaskGraph) -> dict:
    """Full StreamOrder (compute + comm lanes) for a graph's scheduling mode."""
    if graph.mode == "distep":
        return distep_orders(graph)
    compute = zp_compute_order(graph)
    orders = dict(compute)
    orders.update(comm_order(graph, compute))
    return orders


# ---------------------------------------------------------------------------
# offload optimization ("gather and squeeze")


@dataclass(frozen=True)
class OffloadPlanInputs:
    """Inputs of the offload optimizer; times are per microbatch, one layer."""

    experts_per_layer: int
    layers: int
    attention_gpus: int
    expert_gpus: int
    attn_fwd: Fraction  # attention block on an attention GPU
    single_expert_on_attn: Fraction  # one expert, B tokens, on an attention GPU
    expert_layer_on_expert: Fraction  # the resident experts' B tokens on an expert GPU
    n_min: int = 0
    n_max: Optional[int] = None
    squeeze_mode: str = "verbatim"


@dataclass(frozen=True)
class OffloadPlan:
    assignment: ExpertAssignment
    chunk: tuple  # (n_1, n_2)
    t_gather: Fraction
    t_squeeze: Fraction
    alpha: Fraction
    beta: Fraction
    residuals: tuple  # bubble ledger after each layer's squeeze
    note: str = ""


def asym_ea_offload(inputs: OffloadPlanInputs) -> OffloadPlan:
    """Gather-and-squeeze offload optimization.

    Accumulates the per-layer bubble T_gather = T_exp - T_attn until at least
    one chunk's worth T_squeeze can be squeezed out, then offloads
    floor(t_bubble / T_squeeze) chunks at that layer. Memory bounds enter as
    the alpha (upper) and beta (lower) multipliers on the gather rate; at
    most one of them is active. Exact rational arithmetic throughout so the
    chunk floor-division never flips on rounding error.
    """
    n, layers = inputs.experts_per_layer, inputs.layers
    if n < 1 or layers < 1:
        raise ValidationError(["offload inputs need n >= 1 and L >= 1"])
    n1, n2 = chunk_sizes(inputs.attention_gpus, inputs.expert_gpus)
    t_attn = as_fraction(inputs.attn_fwd)
    t_single = as_fraction(inputs.single_expert_on_attn)
    t_exp = as_fraction(inputs.expert_layer_on_expert)
    if min(t_attn, t_single, t_exp) < 0:
        raise ValidationError(["offload input times must be >= 0"])
    if inputs.squeeze_mode not in ("verbatim", "rederived"):
        raise ValueError(f"unknown squeeze mode {inputs.squeeze_mode!r}")

    n_gpus = inputs.expert_gpus
    per_expert_on_expert = t_exp * n_gpus / n  # time one expert's tokens cost an expert GPU
    per_expert_on_attn = t_single * n_gpus / n  # time one acquired expert adds to an attention GPU
    if inputs.squeeze_mode == "verbatim":
        t_squeeze = per_expert_on_expert * n1 + per_expert_on_attn * n2
    else:
        t_squeeze = per_expert_on_expert * n2 + per_expert_on_attn * n1
    t_gather = t_exp - t_attn

    n_min = max(0, inputs.n_min)
    n_max = inputs.n_max
    if n_max is not None and n_min > n_max:
        raise InfeasibleError(f"memory bounds contradict: n_min={n_min} > n_max={n_max}")
    if n_max is not None and math.ceil(Fraction(n_min, n2)) > n_max // n2:
        raise InfeasibleError(
            f"memory bounds admit no whole number of chunks: need ceil({n_min}/{n2}) "
            f"chunks but only floor({n_max}/{n2}) fit"
        )

    zeros = ExpertAssignment.zeros(layers)
    if t_gather <= 0:
        if n_min > 0:
            raise InfeasibleError(
                "memory requires offloading but expert GPUs produce no bubbles to gather "
                f"(T_gather={t_gather} <= 0, n_min={n_min})"
            )
        return OffloadPlan(
            assignment=zeros,
            chunk=(n1, n2),
            t_gather=t_gather,
            t_squeeze=t_squeeze,
            alpha=Fraction(1),
            beta=Fraction(1),
            residuals=(Fraction(0),) * layers,
            note="no bubbles to squeeze",
        )

    alpha = Fraction(1)
    if n_max is not None:
        alpha = min(Fraction(n_max // n2) * t_squeeze / (layers * t_gather), Fraction(1))
    beta = max(Fraction(math.ceil(Fraction(n_min, n2))) * t_squeeze / (layers * t_gather), Fraction(1))
    if alpha < 1 and beta > 1:
        raise InfeasibleError("alpha and beta both activated: memory bounds are inconsistent")

    step = alpha * beta * t_gather
    t_bubble = Fraction(0)
    offload = []
    residuals = []
    for _ in range(layers):
        t_bubble += step
        o = 0
        if t_bubble >= t_squeeze:
            chunks = t_bubble // t_squeeze
            t_bubble -= chunks * t_squeeze
            o = int(chunks) * n2
        offload.append(o)
        residuals.append(t_bubble)

    return OffloadPlan(
        assignment=ExpertAssignment(tuple(offload)),
        chunk=(n1, n2),
        t_gather=t_gather,
        t_squeeze=t_squeeze,
        alpha=alpha,
        beta=beta,
        residuals=tuple(residuals),
    )


def compute_l_busy(expert_layer_on_expert, attn_fwd):
    """Layers an expert GPU may lag before stalling attention:
    T_exp / (T_exp - T_attn); unbounded when experts are not slower."""
    t_exp = as_fraction(expert_layer_on_expert)
    t_attn = as_fraction(attn_fwd)
    if t_exp <= t_attn:
        return math.inf
    return t_exp / (t_exp - t_attn)


def bubble_ledger(inputs: OffloadPlanInputs, layers: Optional[int] = None):
    """Accumulated per-microbatch bubble after each layer with no offloading:
    l * T_gather for layer l (zero when experts are not slower)."""
    t_gather = as_fraction(inputs.expert_layer_on_expert) - as_fraction(inputs.attn_fwd)
    step = max(t_gather, Fraction(0))
    count = layers if layers is not None else inputs.layers
    return tuple(step * l for l in range(1, count + 1))


# ---------------------------------------------------------------------------
# brute-force oracles


def brute_force_offload(
    inputs: OffloadPlanInputs,
    simulate_assignment: Callable,
    per_layer_chunk_cap: int,
    search_bound: int = 200_000,
):
    """Exhaustively simulate every chunk-granular assignment within bounds.

    Returns (assignment, makespan) minimizing simulated makespan; ties go to
    the lexicographically smallest assignment. `simulate_assignment` maps an
    ExpertAssignment to a makespan.
    """
    n1, n2 = chunk_sizes(inputs.attention_gpus, inputs.expert_gpus)
    resident = inputs.experts_per_layer // inputs.expert_gpus
    cap = min(per_layer_chunk_cap, resident // n2)
    options = range(cap + 1)
    space = (cap + 1) ** inputs.layers
    if space > search_bound:
        raise SearchBoundExceeded(f"{space} assignments exceed the bound {search_bound}")

    n_min = max(0, inputs.n_min)
    n_max = inputs.n_max
    best = None
    for chunks in product(options, repeat=inputs.layers):
        total = sum(chunks) * n2
        if total < n_min or (n_max is not None and total > n_max):
            continue
        assignment = ExpertAssignment(tuple(c * n2 for c in chunks))
        makespan = simulate_assignment(assignment)
        if best is None or makespan < best[1]:
            best = (assignment, makespan)
    if best is None:
        raise InfeasibleError("no assignment satisfies the memory bounds")
    return best


def _check_oracle_graph(graph: TaskGraph, name: str):
    if graph.mode not in ("zp-theorem", "zp-full"):
        raise ValueError(f"{name} supports ZP graphs only")
    if any(t.kind in OFFLOAD_KINDS for t in graph.tasks):
        raise ValueError(f"{name} does not support offloaded experts")
    if graph.mode == "zp-full" and not graph.forward_only:
        raise ValueError(f"{name} needs zp-theorem mode (or a forward-only graph)")


def _microbatch_chain(graph: TaskGraph, j: int):
    """Compute tasks of microbatch j in pipeline order, with the comm hops
    (lane, duration) separating consecutive tasks and trailing after the last."""
    layers = graph.layers
    compute = []  # list of Task
    hops = []  # hops[i] = comm path after compute[i]

    def push(task, path):
        compute.append(task)
        hops.append(path)

    for l in range(1, layers + 1):
        has_exp = graph.has(TaskKind.EXP_F, l, j)
        push(graph.task(TaskKind.ATTN_F, l, j), [])
        if has_exp:
            hops[-1] = [graph.task(TaskKind.DISP_F, l, j)]
            path = [graph.task(TaskKind.COMB_F, l, j)]
            if l == layers and not graph.forward_only:
                path.append(graph.task(TaskKind.DISP_B, l, j))
            push(graph.task(TaskKind.EXP_F, l, j), path)
    if graph.forward_only:
        return compute, hops
    for l in range(layers, 0, -1):
        if graph.has(TaskKind.EXP_B, l, j):
            if l < layers:  # layer-L backward hop is attached above
                hops[-1] = [graph.task(TaskKind.DISP_B, l, j)]
            push(graph.task(TaskKind.EXP_B, l, j), [graph.task(TaskKind.COMB_B, l, j)])
        push(graph.task(TaskKind.ATTN_B, l, j), [])
    return compute, hops


_LANE_IDS = {ATTN_LANE: 0, EXP_LANE: 1, DISP_LANE: 2, COMB_LANE: 3}


def brute_force_schedule(graph: TaskGraph, search_bound: int = 5_000_000) -> int:
    """Minimal makespan over all compute-lane linear extensions.

    Exact branch-and-bound over active schedules: tasks are started in
    chronological order, comm transfers follow their producers, and states
    are pruned by lane-work lower bounds and Pareto dominance over the
    exchangeable microbatch chains. Restricted to ZP graphs without
    offloaded experts (each microbatch is then a single task chain) and
    without the zp-full loss turnaround, whose backward dispatch has no
    producer on a compute lane and therefore no canonical comm slot.
    """
    _check_oracle_graph(graph, "brute_force_schedule")

    from .simulator import simulate  # local import: simulator depends on scheduler's orders

    mbs = graph.microbatches
    chains = [_microbatch_chain(graph, j) for j in range(1, mbs + 1)]
    # all chains share one template (durations depend only on kind and layer)
    compute0, hops0 = chains[0]
    length = len(compute0)
    comp_lane = [_LANE_IDS[t.lane] for t in compute0]
    comp_dur = [t.duration for t in compute0]
    hop_spec = [[(_LANE_IDS[h.lane], h.duration) for h in path] for path in hops0]

    # remaining per-lane compute work and remaining chain critical path, by position
    rem_lane = [[0, 0] for _ in range(length + 1)]
    tail = [0] * (length + 1)
    for i in range(length - 1, -1, -1):
        rem_lane[i][0] = rem_lane[i + 1][0] + (comp_dur[i] if comp_lane[i] == 0 else 0)
        rem_lane[i][1] = rem_lane[i + 1][1] + (comp_dur[i] if comp_lane[i] == 1 else 0)
        tail[i] = tail[i + 1] + comp_dur[i] + sum(d for _, d in hop_spec[i])

    upper = simulate(graph, default_orders(graph)).makespan
    best = upper
    visited = 0
    pareto = {}

    def dfs(progress, ready, clocks, curmax):
        nonlocal best, visited
        visited += 1
        if visited > search_bound:
            raise SearchBoundExceeded(f"schedule search exceeded {search_bound} states")

        done = True
        lane_rem = [0, 0]
        chain_lb = 0
        for p, r in zip(progress, ready):
            if p < length:
                done = False
                lane_rem[0] += rem_lane[p][0]
                lane_rem[1] += rem_lane[p][1]
                chain_lb = max(chain_lb, r + tail[p])
        if done:
            best = min(best, curmax)
            return
        lb = max(
            curmax,
            clocks[0] + lane_rem[0],
            clocks[1] + lane_rem[1],
            chain_lb,
        )
        if lb >= best:
            return

        key = tuple(sorted(zip(progress, ready)))
        vec = clocks + (curmax,) + tuple(r for _, r in key)
        bucket = pareto.setdefault(tuple(p for p, _ in key), [])
        for old in bucket:
            if all(a <= b for a, b in zip(old, vec)):
                return
        bucket[:] = [old for old in bucket if not all(a <= b for a, b in zip(vec, old))]
        bucket.append(vec)

        for idx in range(mbs):
            p = progress[idx]
            if p >= length:
                continue
            if idx > 0 and progress[idx - 1] == p and ready[idx - 1] == ready[idx]:
                continue  # identical chains: scheduling either is symmetric
            lane = comp_lane[p]
            start = max(clocks[lane], ready[idx])
            end = start + comp_dur[p]
            new_clocks = list(clocks)
            new_clocks[lane] = end
            new_max = max(curmax, end)
            t = end
            for hop_lane, hop_dur in hop_spec[p]:
                t = max(new_clocks[hop_lane], t) + hop_dur
                new_clocks[hop_lane] = t
                new_max = max(new_max, t)
            new_progress = list(progress)
            new_progress[idx] = p + 1
            new_ready = list(ready)
            new_ready[idx] = t if hop_spec[p] else end
            dfs(tuple(new_progress), tuple(new_ready), tuple(new_clocks), new_max)

    dfs((0,) * mbs, (0,) * mbs, (0, 0, 0, 0), 0)
    return best


def _lane_interleavings(chains):
    """All interleavings of the given chains (lists of task ids)."""
    if not any(chains):
        yield []
        return
    for i, chain in enumerate(chains):
        if not chain:
            continue
        rest = chains[:i] + [chain[1:]] + chains[i + 1 :]
        for tail_order in _lane_interleavings(rest):
            yield [chain[0]] + tail_order


def exhaustive_min_makespan(graph: TaskGraph, search_bound: int = 200_000) -> int:
    """Plain enumeration over joint compute-lane orders; cross-check oracle.

    Joint orders whose combined lane+dependency graph deadlocks are not
    schedules and are skipped. Feasible only for tiny graphs;
    `brute_force_schedule` is validated against this on small instances.
    """
    from .simulator import DeadlockError, simulate

    _check_oracle_graph(graph, "exhaustive_min_makespan")
    mbs = graph.microbatches
    attn_chains = []
    exp_chains = []
    for j in range(1, mbs + 1):
        compute, _ = _microbatch_chain(graph, j)
        attn_chains.append([t.id for t in compute if t.lane == ATTN_LANE])
        exp_chains.append([t.id for t in compute if t.lane == EXP_LANE])

    attn_orders = list(_lane_interleavings(attn_chains))
    exp_orders = list(_lane_interleavings(exp_chains))
    if len(attn_orders) * len(exp_orders) > search_bound:
        raise SearchBoundExceeded(
            f"{len(attn_orders)}x{len(exp_orders)} joint orders exceed the bound {search_bound}"
        )

    best = None
    for attn in attn_orders:
        for exp in exp_orders:
            compute = {ATTN_LANE: attn, EXP_LANE: exp}
            orders = dict(compute)
            orders.update(comm_order(graph, compute))
            try:
                makespan = simulate(graph, orders).makespan
            except DeadlockError:
                continue
            if best is None or makespan < best:
                best = makespan
    return best
