"""Shared spec factories for the test suite."""

from fractions import Fraction

import pytest

from zpsim.core import (
    GpuClass,
    HardwareProfile,
    ModelSpec,
    RunOptions,
    Spec,
    TaskDurations,
    ZpGroupSpec,
)


def table_spec(
    M=1,
    N=1,
    L=3,
    R=3,
    n=6,
    k=2,
    attn_fwd=3,
    expert_fwd=4,
    single_expert=3,
    dispatch=0,
    combine=0,
    gamma=Fraction(1),
    seq_len=16,
    expert_mem=0,
    activation_mem_per_token=0,
    attn_capacity=10**12,
    exp_capacity=10**12,
    non_expert_mem_attention=0,
    non_expert_mem_expert=0,
    **run_kwargs,
) -> Spec:
    """Spec with verbatim duration tables (the workhorse for simulator tests)."""
    attn = GpuClass("fast", attn_capacity)
    exp = GpuClass("slow", exp_capacity)
    profile = HardwareProfile(
        attention_gpu=attn,
        expert_gpu=exp,
        attn_durations={"attn_fwd": attn_fwd, "single_expert_fwd": single_expert},
        expert_durations={"expert_layer_fwd": expert_fwd},
        comm_durations={"dispatch": dispatch, "combine": combine},
        non_expert_mem_attention=non_expert_mem_attention,
        non_expert_mem_expert=non_expert_mem_expert,
    )
    cluster = ZpGroupSpec(M, N, attn, exp, 10**11, 4096)
    model = ModelSpec(
        layers=L,
        experts_per_layer=n,
        top_k=min(k, n),
        hidden_dim=64,
        seq_len=seq_len,
        microbatches=R,
        sequences_per_microbatch=1,
        expert_mem=expert_mem,
        activation_mem_per_token=activation_mem_per_token,
    )
    return Spec(cluster, model, profile, RunOptions(gamma=gamma, **run_kwargs))


def table_durations(
    attn_fwd=3, expert_fwd=4, single_expert=3, dispatch=0, combine=0, gamma=Fraction(1)
) -> TaskDurations:
    return TaskDurations(attn_fwd, expert_fwd, single_expert, dispatch, combine, gamma)


def coeff_spec(
    M=2,
    N=2,
    L=4,
    R=4,
    n=8,
    k=2,
    seq_len=1000,
    fast_attn=(1, Fraction(1, 1000)),
    slow_attn=(1, Fraction(1, 100)),
    fast_expert=Fraction(1),
    slow_expert=Fraction(5, 4),
    expert_mem=10**6,
    gamma=Fraction(1),
    **run_kwargs,
) -> Spec:
    """Spec with a coefficient profile (quadratic attention disparity)."""
    fast = GpuClass("fast", 10**12, Fraction(fast_attn[0]), Fraction(fast_attn[1]), fast_expert)
    slow = GpuClass("slow", 10**12, Fraction(slow_attn[0]), Fraction(slow_attn[1]), slow_expert)
    profile = HardwareProfile(attention_gpu=fast, expert_gpu=slow)
    cluster = ZpGroupSpec(M, N, fast, slow, 10**12, 2)
    model = ModelSpec(
        layers=L,
        experts_per_layer=n,
        top_k=min(k, n),
        hidden_dim=64,
        seq_len=seq_len,
        microbatches=R,
        sequences_per_microbatch=1,
        expert_mem=expert_mem,
        activation_mem_per_token=0,
    )
    return Spec(cluster, model, profile, RunOptions(gamma=gamma, **run_kwargs))


def minimal_config(**overrides) -> dict:
    """Smallest legal config file contents (M=1, N=1, L=1, R=1)."""
    config = {
        "cluster": {
            "attention_gpus": 1,
            "expert_gpus": 1,
            "link_bandwidth": 100_000_000_000,
            "bytes_per_token": 4096,
        },
        "model": {
            "layers": 1,
            "experts_per_layer": 1,
            "top_k": 1,
            "hidden_dim": 8,
            "seq_len": 4,
            "microbatches": 1,
            "sequences_per_microbatch": 1,
            "expert_mem": 0,
            "activation_mem_per_token": 0,
        },
        "profile": {
            "attention_gpu": {
                "name": "fast",
                "memory_capacity": 1_000_000,
                "durations": {"attn_fwd": 3, "single_expert_fwd": 3},
            },
            "expert_gpu": {
                "name": "slow",
                "memory_capacity": 1_000_000,
                "durations": {"expert_layer_fwd": 4},
            },
            "comm": {"dispatch": 0, "combine": 0},
        },
        "run": {"mode": "zp-full", "gamma": 1.0},
    }
    for dotted, value in overrides.items():
        node = config
        *path, last = dotted.split(".")
        for key in path:
            node = node.setdefault(key, {})
        node[last] = value
    return config


@pytest.fixture
def offload_demo_spec() -> Spec:
    """Three-layer short-sequence scenario where expert GPUs run 33% slower."""
    return table_spec(attn_fwd=3000, expert_fwd=4000, single_expert=3000)
