"""Cost model: durations, workload shape, memory bounds, analytic throughputs."""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

from .core import (
    GpuClass,
    InfeasibleError,
    Spec,
    TaskDurations,
    ZpGroupSpec,
    as_fraction,
    round_ns,
)


def attention_duration(seq_len: int, sequences, gpu: GpuClass) -> int:
    """sequences * (linear*s + quadratic*s^2), rounded to integer ns."""
    if seq_len < 0:
        raise ValueError("seq_len must be >= 0")
    s = Fraction(seq_len)
    per_seq = gpu.attn_coeff_linear * s + gpu.attn_coeff_quadratic * s * s
    return round_ns(as_fraction(sequences) * per_seq)


def expert_duration(tokens, gpu: GpuClass, experts_resident: Optional[int] = None) -> int:
    """Expert compute time for `tokens` routed tokens; linear in tokens.

    Independent of how the tokens split across resident experts under
    balanced routing, so `experts_resident` does not enter the formula.
    """
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    del experts_resident
    return round_ns(gpu.expert_coeff * as_fraction(tokens))


def alltoall_duration(tokens, cluster: ZpGroupSpec) -> int:
    """One direction's aggregated transfer time for a (layer, microbatch)."""
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    if cluster.link_bandwidth <= 0:
        raise ValueError("link_bandwidth must be > 0")
    seconds = as_fraction(tokens) * cluster.bytes_per_token / cluster.link_bandwidth
    return round_ns(seconds * 1_000_000_000)


@dataclass(frozen=True)
class WorkloadShape:
    """Token counts per microbatch under balanced top-k routing."""

    tokens_per_microbatch_per_attn_gpu: int
    tokens_per_expert_gpu: Fraction  # B
    seq_len: int


def workload_shape(spec: Spec, load_factor=Fraction(1)) -> WorkloadShape:
    """Balanced routing: B = global tokens per microbatch * k / N.

    `load_factor` scales B for what-if analysis of skewed expert load
    (the busiest expert GPU receiving load_factor times its fair share).
    """
    md, cl = spec.model, spec.cluster
    per_attn = md.seq_len * md.sequences_per_microbatch
    global_tokens = per_attn * cl.attention_gpus
    b = Fraction(global_tokens * md.top_k, cl.expert_gpus) * as_fraction(load_factor)
    return WorkloadShape(
        tokens_per_microbatch_per_attn_gpu=per_attn,
        tokens_per_expert_gpu=b,
        seq_len=md.seq_len,
    )


def routed_tokens_per_microbatch(spec: Spec) -> int:
    """Total token copies crossing the link per (layer, microbatch) direction."""
    md, cl = spec.model, spec.cluster
    return md.seq_len * md.sequences_per_microbatch * cl.attention_gpus * md.top_k


def derive_task_durations(spec: Spec, load_factor=Fraction(1)) -> TaskDurations:
    """Per-task durations from the profile; duration tables win over coefficients."""
    pf, cl = spec.profile, spec.cluster
    shape = workload_shape(spec, load_factor)
    b = shape.tokens_per_expert_gpu

    if pf.attn_durations is not None:
        attn_fwd = pf.attn_durations["attn_fwd"]
        single_expert = pf.attn_durations["single_expert_fwd"]
    else:
        attn_fwd = attention_duration(spec.model.seq_len, spec.model.sequences_per_microbatch, cl.attention_class)
        single_expert = round_ns(cl.attention_class.expert_coeff * b)

    if pf.expert_durations is not None:
        expert_fwd = pf.expert_durations["expert_layer_fwd"]
    else:
        expert_fwd = round_ns(cl.expert_class.expert_coeff * b)

    if pf.comm_durations is not None:
        dispatch = pf.comm_durations["dispatch"]
        combine = pf.comm_durations["combine"]
    else:
        dispatch = combine = alltoall_duration(routed_tokens_per_microbatch(spec), cl)

    return TaskDurations(
        attn_fwd=attn_fwd,
        expert_layer_fwd_on_expert_gpu=expert_fwd,
        single_expert_fwd_on_attn_gpu=single_expert,
        dispatch=dispatch,
        combine=combine,
        backward_factor=spec.run.gamma,
    )


@dataclass(frozen=True)
class MemoryBounds:
    """Bounds on the total experts offloaded per expert GPU (sum over layers)."""

    n_min: int
    n_max: Optional[int]  # None = unbounded (expert weights take no memory)


def memory_bounds(spec: Spec) -> MemoryBounds:
    """Memory-driven offload bounds.

    n_min: experts per expert GPU that do not fit and must move out.
    n_max: experts per expert GPU that attention GPUs can absorb, converted
    through the chunk ratio M/N. Raises InfeasibleError when n_min > n_max.
    """
    md, cl, pf = spec.model, spec.cluster, spec.profile
    m, n_gpus = cl.attention_gpus, cl.expert_gpus
    shape = workload_shape(spec)

    resident_expert_tokens = shape.tokens_per_expert_gpu * md.microbatches
    expert_avail = (
        cl.expert_class.memory_capacity
        - pf.non_expert_mem_expert
        - round_ns(as_fraction(md.activation_mem_per_token) * resident_expert_tokens)
    )
    experts_per_gpu_total = md.layers * (md.experts_per_layer // n_gpus)
    if md.expert_mem <= 0:
        return MemoryBounds(n_min=0, n_max=None)
    fit = max(0, expert_avail) // md.expert_mem
    n_min = max(0, experts_per_gpu_total - fit)

    resident_attn_tokens = shape.tokens_per_microbatch_per_attn_gpu * md.microbatches
    attn_avail = (
        cl.attention_class.memory_capacity
        - pf.non_expert_mem_attention
        - md.activation_mem_per_token * resident_attn_tokens
    )
    capacity = max(0, attn_avail) // md.expert_mem  # experts one attention GPU can hold
    n_max = (capacity * m) // n_gpus

    if n_min > n_max:
        raise InfeasibleError(
            f"memory-infeasible: must offload n_min={n_min} experts per expert GPU "
            f"but attention GPUs can absorb only n_max={n_max}"
        )
    return MemoryBounds(n_min=n_min, n_max=n_max)


def ep_ideal_throughput(per_class_times: Sequence, layers: int) -> Fraction:
    """Sum of per-class throughputs 1 / ((attn + expert) * L).

    `per_class_times` holds (attention_time, expert_time) pairs, one per GPU
    class running the whole model on its own. An infinite time contributes
    zero throughput.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    total = Fraction(0)
    for attn, exp in per_class_times:
        if attn == math.inf or exp == math.inf:
            continue
        denom = (as_fraction(attn) + as_fraction(exp)) * layers
        if denom <= 0:
            raise ValueError("per-class times must be positive")
        total += Fraction(1) / denom
    return total


def theoretical_speedup(n: int, layers: int) -> Fraction:
    """Pipelined-overlap speedup bound 8nL / (6nL + 3); tends to 4/3."""
    if n < 1 or layers < 1:
        raise ValueError("n and layers must be >= 1")
    return Fraction(8 * n * layers, 6 * n * layers + 3)
