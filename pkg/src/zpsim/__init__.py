"""Discrete-event simulator and schedule optimizer for training MoE models
with attention/expert disaggregation on mixed-generation GPU clusters."""

from .core import (
    ConfigError,
    ExpertAssignment,
    GpuClass,
    HardwareProfile,
    InfeasibleError,
    ModelSpec,
    RunOptions,
    Spec,
    TaskDurations,
    ValidationError,
    ZpGroupSpec,
    load_config,
    parse_config,
    save_config,
    spec_to_config,
    validate_spec,
    with_run,
)
from .costmodel import (
    MemoryBounds,
    WorkloadShape,
    attention_duration,
    alltoall_duration,
    derive_task_durations,
    ep_ideal_throughput,
    expert_duration,
    memory_bounds,
    theoretical_speedup,
    workload_shape,
)
from .scheduler import (
    OffloadPlan,
    OffloadPlanInputs,
    asym_ea_offload,
    brute_force_offload,
    brute_force_schedule,
    chunk_sizes,
    comm_order,
    compute_l_busy,
    default_orders,
    zp_compute_order,
)
from .simulator import (
    DeadlockError,
    Metrics,
    Timeline,
    compute_metrics,
    export_trace,
    simulate,
    validate_timeline,
)
from .taskgraph import (
    Task,
    TaskGraph,
    TaskKind,
    build_distep_graph,
    build_zp_graph,
    ep_iteration_time,
    pp_assign_layers,
)
from .planner import compare_strategies, sweep_ratios

__version__ = "0.1.0"
