"""Typed task DAGs for ZP and DistEP runs, plus EP and PP analytic models.

Task naming: Attn/Exp/Disp/Comb/OffExp crossed with F(orward)/B(ackward),
indexed by (layer, microbatch). Communication is aggregated: one dispatch and
one combine task per (layer, microbatch, direction), carried on the sending
device's comm lane. Attention and expert GPUs of a group move in lockstep
under balanced routing, so one representative device per role is modelled.
"""

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence

from .core import (
    ExpertAssignment,
    InfeasibleError,
    Spec,
    TaskDurations,
    ValidationError,
    round_ns,
)

ATTN_DEVICE = "attn"
EXP_DEVICE = "exp"

COMPUTE = "compute"
DISPATCH = "dispatch"
COMBINE = "combine"


class TaskKind(str, Enum):
    ATTN_F = "AttnF"
    ATTN_B = "AttnB"
    EXP_F = "ExpF"
    EXP_B = "ExpB"
    OFF_EXP_F = "OffExpF"
    OFF_EXP_B = "OffExpB"
    DISP_F = "DispF"
    DISP_B = "DispB"
    COMB_F = "CombF"
    COMB_B = "CombB"


COMPUTE_KINDS = {TaskKind.ATTN_F, TaskKind.ATTN_B, TaskKind.EXP_F, TaskKind.EXP_B,
                 TaskKind.OFF_EXP_F, TaskKind.OFF_EXP_B}
OFFLOAD_KINDS = {TaskKind.OFF_EXP_F, TaskKind.OFF_EXP_B}

_KIND_PLACEMENT = {
    TaskKind.ATTN_F: (ATTN_DEVICE, COMPUTE),
    TaskKind.ATTN_B: (ATTN_DEVICE, COMPUTE),
    TaskKind.OFF_EXP_F: (ATTN_DEVICE, COMPUTE),
    TaskKind.OFF_EXP_B: (ATTN_DEVICE, COMPUTE),
    TaskKind.EXP_F: (EXP_DEVICE, COMPUTE),
    TaskKind.EXP_B: (EXP_DEVICE, COMPUTE),
    TaskKind.DISP_F: (ATTN_DEVICE, DISPATCH),  # attention sends tokens out
    TaskKind.DISP_B: (ATTN_DEVICE, DISPATCH),  # attention sends gradients out
    TaskKind.COMB_F: (EXP_DEVICE, COMBINE),  # expert sends outputs back
    TaskKind.COMB_B: (EXP_DEVICE, COMBINE),
}


@dataclass(frozen=True)
class Task:
    id: int
    kind: TaskKind
    layer: int
    microbatch: int
    device: str
    lane: tuple
    duration: int


@dataclass
class TaskGraph:
    """Immutable-after-construction DAG of tasks bound to device lanes."""

    mode: str
    layers: int
    microbatches: int
    tasks: tuple
    edges: tuple
    assignment: ExpertAssignment
    forward_only: bool = False
    _index: dict = field(default_factory=dict, repr=False)
    _succ: dict = field(default_factory=dict, repr=False)
    _pred: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {(t.kind, t.layer, t.microbatch): t.id for t in self.tasks}
        self._succ = {t.id: [] for t in self.tasks}
        self._pred = {t.id: [] for t in self.tasks}
        for u, v in self.edges:
            self._succ[u].append(v)
            self._pred[v].append(u)
        _assert_acyclic(self)

    def task(self, kind: TaskKind, layer: int, microbatch: int) -> Task:
        return self.tasks[self._index[(kind, layer, microbatch)]]

    def has(self, kind: TaskKind, layer: int, microbatch: int) -> bool:
        return (kind, layer, microbatch) in self._index

    def successors(self, task_id: int):
        return self._succ[task_id]

    def predecessors(self, task_id: int):
        return self._pred[task_id]

    def lanes(self):
        seen = []
        for t in self.tasks:
            if t.lane not in seen:
                seen.append(t.lane)
        return seen

    def tasks_on(self, lane):
        return [t for t in self.tasks if t.lane == lane]


def _assert_acyclic(graph: TaskGraph):
    indeg = {t.id: len(graph._pred[t.id]) for t in graph.tasks}
    queue = [tid for tid, d in sorted(indeg.items()) if d == 0]
    seen = 0
    while queue:
        u = queue.pop()
        seen += 1
        for v in graph._succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    if seen != len(graph.tasks):
        raise ValidationError(["task graph contains a dependency cycle"])


class _Builder:
    def __init__(self, mode, layers, microbatches, assignment, forward_only):
        self.mode = mode
        self.layers = layers
        self.microbatches = microbatches
        self.assignment = assignment
        self.forward_only = forward_only
        self.tasks = []
        self.edges = set()
        self.index = {}

    def add(self, kind: TaskKind, layer: int, microbatch: int, duration: int) -> int:
        device, stream = _KIND_PLACEMENT[kind]
        tid = len(self.tasks)
        task = Task(
            id=tid,
            kind=kind,
            layer=layer,
            microbatch=microbatch,
            device=device,
            lane=(device, stream),
            duration=int(duration),
        )
        self.tasks.append(task)
        self.index[(kind, layer, microbatch)] = tid
        return tid

    def link(self, u_key, v_key):
        self.edges.add((self.index[u_key], self.index[v_key]))

    def build(self) -> TaskGraph:
        return TaskGraph(
            mode=self.mode,
            layers=self.layers,
            microbatches=self.microbatches,
            tasks=tuple(self.tasks),
            edges=tuple(sorted(self.edges)),
            assignment=self.assignment,
            forward_only=self.forward_only,
        )


def offload_scaling(spec: Spec, assignment: ExpertAssignment):
    """Per-layer expert-GPU duration scale and attention-side offload share.

    Offloading o_l experts per expert GPU removes o_l*N/n of the expert GPU's
    tokens and adds o_l*N/M acquired experts to each attention GPU, each worth
    N/n of the single-expert time measured over B tokens.
    """
    md, cl = spec.model, spec.cluster
    n, m, n_gpus = md.experts_per_layer, cl.attention_gpus, cl.expert_gpus
    scales = []
    attn_shares = []
    for o in assignment.offload:
        if o < 0 or o > n // n_gpus:
            raise ValidationError([f"offload count {o} outside [0, {n // n_gpus}]"])
        scales.append(1 - Fraction(o * n_gpus, n))
        attn_shares.append(Fraction(o * n_gpus * n_gpus, n * m))
    return scales, attn_shares


def _check_chunks(spec: Spec, assignment: ExpertAssignment):
    from .scheduler import chunk_sizes  # local import to avoid a cycle

    if all(o == 0 for o in assignment.offload):
        return
    m, n_gpus = spec.cluster.attention_gpus, spec.cluster.expert_gpus
    _, n2 = chunk_sizes(m, n_gpus)
    bad = [o for o in assignment.offload if o % n2 != 0]
    if bad:
        raise ValidationError([f"offload counts {bad} are not multiples of chunk size n_2={n2}"])


def build_zp_graph(
    spec: Spec,
    durations: TaskDurations,
    assignment: Optional[ExpertAssignment] = None,
    mode: Optional[str] = None,
    include_backward: bool = True,
) -> TaskGraph:
    """ZP task graph.

    Forward chain per (layer i, microbatch j):
    AttnF(i,j) -> DispF(i,j) -> ExpF(i,j) -> CombF(i,j) -> AttnF(i+1,j),
    mirrored for backward. zp-theorem mode turns around directly at
    AttnF(L,j) -> AttnB(L,j) with expert tasks only on layers 1..L-1;
    zp-full mode keeps layer-L expert tasks between them. Offloaded-expert
    tasks run on attention devices, gated by the layer's dispatch, and join
    the layer's combine barrier.
    """
    mode = mode or spec.run.mode
    if mode not in ("zp-theorem", "zp-full"):
        raise ValueError(f"unknown ZP graph mode {mode!r}")
    md = spec.model
    layers, mbs = md.layers, md.microbatches
    assignment = assignment or ExpertAssignment.zeros(layers)
    if len(assignment.offload) != layers:
        raise ValidationError([f"assignment has {len(assignment.offload)} entries for {layers} layers"])
    if mode == "zp-theorem" and assignment.offload[-1] > 0:
        raise ValidationError(
            ["zp-theorem mode has no layer-" + str(layers) + " expert tasks to offload"]
        )
    _check_chunks(spec, assignment)
    scales, attn_shares = offload_scaling(spec, assignment)

    gamma = durations.backward_factor
    t_attn = Fraction(durations.attn_fwd)
    t_exp = Fraction(durations.expert_layer_fwd_on_expert_gpu)
    t_single = Fraction(durations.single_expert_fwd_on_attn_gpu)
    t_disp = Fraction(durations.dispatch)
    t_comb = Fraction(durations.combine)

    expert_layers = range(1, layers) if mode == "zp-theorem" else range(1, layers + 1)
    expert_layer_set = set(expert_layers)

    b = _Builder(mode, layers, mbs, assignment, forward_only=not include_backward)

    def exp_f_dur(l):
        return round_ns(t_exp * scales[l - 1])

    def exp_b_dur(l):
        return round_ns(gamma * t_exp * scales[l - 1])

    def off_f_dur(l):
        return round_ns(t_single * attn_shares[l - 1])

    def off_b_dur(l):
        return round_ns(gamma * t_single * attn_shares[l - 1])

    # forward sweep
    for l in range(1, layers + 1):
        for j in range(1, mbs + 1):
            b.add(TaskKind.ATTN_F, l, j, durations.attn_fwd)
            if l > 1:
                b.link((TaskKind.COMB_F, l - 1, j), (TaskKind.ATTN_F, l, j))
        if l in expert_layer_set:
            offloaded = assignment.offload[l - 1] > 0
            for j in range(1, mbs + 1):
                b.add(TaskKind.DISP_F, l, j, durations.dispatch)
                b.add(TaskKind.EXP_F, l, j, exp_f_dur(l))
                b.link((TaskKind.ATTN_F, l, j), (TaskKind.DISP_F, l, j))
                b.link((TaskKind.DISP_F, l, j), (TaskKind.EXP_F, l, j))
                b.add(TaskKind.COMB_F, l, j, durations.combine)
                b.link((TaskKind.EXP_F, l, j), (TaskKind.COMB_F, l, j))
                if offloaded:
                    b.add(TaskKind.OFF_EXP_F, l, j, off_f_dur(l))
                    b.link((TaskKind.DISP_F, l, j), (TaskKind.OFF_EXP_F, l, j))
                    b.link((TaskKind.OFF_EXP_F, l, j), (TaskKind.COMB_F, l, j))

    if not include_backward:
        return b.build()

    attn_bwd = round_ns(gamma * t_attn)
    disp_bwd = round_ns(gamma * t_disp)
    comb_bwd = round_ns(gamma * t_comb)

    # backward sweep, layer L first
    for l in range(layers, 0, -1):
        for j in range(1, mbs + 1):
            b.add(TaskKind.ATTN_B, l, j, attn_bwd)
        if l in expert_layer_set:
            offloaded = assignment.offload[l - 1] > 0
            for j in range(1, mbs + 1):
                b.add(TaskKind.DISP_B, l, j, disp_bwd)
                b.add(TaskKind.EXP_B, l, j, exp_b_dur(l))
                b.add(TaskKind.COMB_B, l, j, comb_bwd)
                b.link((TaskKind.DISP_B, l, j), (TaskKind.EXP_B, l, j))
                b.link((TaskKind.EXP_B, l, j), (TaskKind.COMB_B, l, j))
                b.link((TaskKind.COMB_B, l, j), (TaskKind.ATTN_B, l, j))
                if offloaded:
                    b.add(TaskKind.OFF_EXP_B, l, j, off_b_dur(l))
                    b.link((TaskKind.DISP_B, l, j), (TaskKind.OFF_EXP_B, l, j))
                    b.link((TaskKind.OFF_EXP_B, l, j), (TaskKind.COMB_B, l, j))
                if l == layers:
                    # loss turnaround: layer-L gradients leave once the
                    # layer's combined forward outputs are on the attention GPU
                    b.link((TaskKind.COMB_F, l, j), (TaskKind.DISP_B, l, j))
                else:
                    b.link((TaskKind.ATTN_B, l + 1, j), (TaskKind.DISP_B, l, j))

    if mode == "zp-theorem":
        for j in range(1, mbs + 1):
            b.link((TaskKind.ATTN_F, layers, j), (TaskKind.ATTN_B, layers, j))

    return b.build()


def build_distep_graph(
    spec: Spec,
    durations: TaskDurations,
    include_backward: bool = True,
) -> TaskGraph:
    """zp-full graph with no offload plus lockstep serialization edges.

    No device starts work for (layer, microbatch+1) or the next layer until
    the current (layer, microbatch) unit's combine lands; symmetrically in
    backward. Edge-wise a supergraph of the matching ZP graph.
    """
    graph = build_zp_graph(
        spec,
        durations,
        assignment=None,
        mode="zp-full",
        include_backward=include_backward,
    )
    layers, mbs = graph.layers, graph.microbatches
    edges = set(graph.edges)

    def tid(kind, l, j):
        return graph.task(kind, l, j).id

    for l in range(1, layers + 1):
        for j in range(1, mbs):
            edges.add((tid(TaskKind.COMB_F, l, j), tid(TaskKind.ATTN_F, l, j + 1)))
        if l < layers:
            edges.add((tid(TaskKind.COMB_F, l, mbs), tid(TaskKind.ATTN_F, l + 1, 1)))

    if include_backward:
        edges.add((tid(TaskKind.COMB_F, layers, mbs), tid(TaskKind.DISP_B, layers, 1)))
        for l in range(layers, 0, -1):
            for j in range(1, mbs):
                edges.add((tid(TaskKind.ATTN_B, l, j), tid(TaskKind.DISP_B, l, j + 1)))
            if l > 1:
                edges.add((tid(TaskKind.ATTN_B, l, mbs), tid(TaskKind.DISP_B, l - 1, 1)))

    return TaskGraph(
        mode="distep",
        layers=layers,
        microbatches=mbs,
        tasks=graph.tasks,
        edges=tuple(sorted(edges)),
        assignment=graph.assignment,
        forward_only=not include_backward,
    )


def token_flow(spec: Spec, assignment: ExpertAssignment, layer: int) -> dict:
    """Token routing split for one (layer, microbatch): conservation check."""
    from .costmodel import routed_tokens_per_microbatch

    total = Fraction(routed_tokens_per_microbatch(spec))
    o = assignment.offload[layer - 1]
    n, n_gpus = spec.model.experts_per_layer, spec.cluster.expert_gpus
    offloaded_share = Fraction(o * n_gpus, n)
    to_offloaded = total * offloaded_share
    to_experts = total - to_offloaded
    return {
        "entering_dispatch": total,
        "to_expert_gpus": to_experts,
        "to_offloaded_experts": to_offloaded,
        "leaving_combine": to_experts + to_offloaded,
    }


def ep_iteration_time(
    per_class_times: Sequence,
    comm: tuple,
    layers: int,
    microbatches: int,
    gamma,
) -> int:
    """Heterogeneity-unaware EP: every step is gated by the slowest GPU.

    Per (layer, microbatch): max attention over classes + dispatch + max
    expert over classes + combine; summed over layers and microbatches,
    forward and backward (x(1 + gamma)).
    """
    attn = max(Fraction(a) for a, _ in per_class_times)
    exp = max(Fraction(e) for _, e in per_class_times)
    disp, comb = (Fraction(c) for c in comm)
    step = attn + disp + exp + comb
    return round_ns((1 + Fraction(gamma)) * layers * microbatches * step)


@dataclass(frozen=True)
class PpAssignment:
    stage_layers: tuple  # tuple of per-stage layer-count
    stage_times: tuple  # per-stage per-microbatch time, ns
    iteration_time: int


def pp_assign_layers(
    stage_layer_times: Sequence,
    layer_mem: Sequence,
    stage_mem: Sequence,
    microbatches: int,
    gamma,
) -> PpAssignment:
    """Contiguous layer split minimizing the max stage time under memory caps.

    stage_layer_times[s][l] is layer l's per-microbatch time on stage s's GPU
    class. Exhaustive over split points (L is small). Ties give earlier
    stages more layers. Iteration time uses a synchronous fill-drain model:
    (R + S - 1) * max_stage_time * (1 + gamma).
    """
    stages = len(stage_layer_times)
    layers = len(layer_mem)
    if stages < 2:
        raise ValueError("need at least 2 stages")
    if layers < stages:
        raise InfeasibleError(f"{layers} layers cannot fill {stages} stages")
    if any(len(times) != layers for times in stage_layer_times):
        raise ValueError("stage_layer_times must cover every layer for every stage")

    best = None  # (max_time, composition, stage_times)

    def compositions(remaining_layers, remaining_stages):
        if remaining_stages == 1:
            yield (remaining_layers,)
            return
        # larger first-stage counts first: documented tie-break
        for head in range(remaining_layers - remaining_stages + 1, 0, -1):
            for rest in compositions(remaining_layers - head, remaining_stages - 1):
                yield (head,) + rest

    for comp in compositions(layers, stages):
        start = 0
        stage_times = []
        feasible = True
        for s, count in enumerate(comp):
            segment = range(start, start + count)
            if sum(layer_mem[l] for l in segment) > stage_mem[s]:
                feasible = False
                break
            stage_times.append(sum(stage_layer_times[s][l] for l in segment))
            start += count
        if not feasible:
            continue
        cand = (max(stage_times), comp, tuple(stage_times))
        if best is None or cand[0] < best[0]:
            best = cand

    if best is None:
        oversize = [
            l for l in range(layers) if all(layer_mem[l] > cap for cap in stage_mem)
        ]
        detail = f"; layers {oversize} exceed every stage's memory" if oversize else ""
        raise InfeasibleError("no contiguous layer split fits stage memory" + detail)

    max_time, comp, stage_times = best
    iteration = round_ns(
        Fraction(microbatches + stages - 1) * Fraction(max_time) * (1 + Fraction(gamma))
    )
    return PpAssignment(stage_layers=comp, stage_times=stage_times, iteration_time=iteration)


def graph_to_json(graph: TaskGraph) -> dict:
    return {
        "mode": graph.mode,
        "layers": graph.layers,
        "microbatches": graph.microbatches,
        "forward_only": graph.forward_only,
        "offload": list(graph.assignment.offload),
        "tasks": [
            {
                "id": t.id,
                "kind": t.kind.value,
                "layer": t.layer,
                "microbatch": t.microbatch,
                "device": t.device,
                "lane": list(t.lane),
                "duration": t.duration,
            }
            for t in graph.tasks
        ],
        "edges": [list(e) for e in graph.edges],
    }
