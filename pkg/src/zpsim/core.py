"""Domain types, JSON config ingestion and invariant validation.

All times are integer nanoseconds once a spec is constructed; fractional
inputs are rounded half-up at ingestion. Memory is in bytes. Spec objects
are frozen dataclasses and safe to share between threads.
"""

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence


class ConfigError(Exception):
    """Config file is malformed (bad JSON, wrong types, unknown keys)."""


class ValidationError(Exception):
    """One or more spec invariants are violated."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InfeasibleError(Exception):
    """Instance cannot be realised (e.g. memory bounds contradict)."""


MODES = ("zp-theorem", "zp-full")
SQUEEZE_MODES = ("verbatim", "rederived")


def as_fraction(value) -> Fraction:
    """Exact rational from a JSON number (floats read as decimal literals)."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(str(value))
    if isinstance(value, Fraction):
        return value
    raise ConfigError(f"expected a number, got {value!r}")


def round_ns(value) -> int:
    """Round a rational time to integer nanoseconds, half-up."""
    f = value if isinstance(value, Fraction) else as_fraction(value)
    return int((f + Fraction(1, 2)).__floor__()) if f >= 0 else -int((-f + Fraction(1, 2)).__floor__())


@dataclass(frozen=True)
class GpuClass:
    """One GPU model: memory plus compute-cost coefficients.

    attn_coeff_linear/attn_coeff_quadratic give per-sequence attention time
    as linear + quadratic terms in sequence length (ns/token, ns/token^2).
    A zero quadratic term models sequence-length-independent attention.
    expert_coeff is ns per routed token of expert (FFN) compute.
    """

    name: str
    memory_capacity: int
    attn_coeff_linear: Fraction = Fraction(0)
    attn_coeff_quadratic: Fraction = Fraction(0)
    expert_coeff: Fraction = Fraction(0)


@dataclass(frozen=True)
class ZpGroupSpec:
    """Cluster shape of one group: M attention GPUs and N expert GPUs."""

    attention_gpus: int
    expert_gpus: int
    attention_class: GpuClass
    expert_class: GpuClass
    link_bandwidth: int  # bytes/s between attention and expert GPUs
    bytes_per_token: int


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    experts_per_layer: int
    top_k: int
    hidden_dim: int
    seq_len: int
    microbatches: int
    sequences_per_microbatch: int  # per attention GPU
    expert_mem: int  # bytes per expert: weights + grads + optimizer state
    activation_mem_per_token: int


@dataclass(frozen=True)
class ExpertAssignment:
    """Per-layer count of experts each expert GPU offloads to attention GPUs."""

    offload: tuple

    def __post_init__(self):
        object.__setattr__(self, "offload", tuple(int(o) for o in self.offload))

    @property
    def total(self) -> int:
        return sum(self.offload)

    @staticmethod
    def zeros(layers: int) -> "ExpertAssignment":
        return ExpertAssignment(offload=(0,) * layers)


@dataclass(frozen=True)
class TaskDurations:
    """Per-microbatch forward durations (ns) plus the backward scale factor."""

    attn_fwd: int
    expert_layer_fwd_on_expert_gpu: int
    single_expert_fwd_on_attn_gpu: int
    dispatch: int
    combine: int
    backward_factor: Fraction = Fraction(2)


@dataclass(frozen=True)
class HardwareProfile:
    """GPU classes plus optional verbatim duration overrides.

    For each GPU class exactly one of the coefficient model (on the GpuClass)
    or a duration table is active. Comm durations default to the
    bandwidth-linear model unless overridden.
    """

    attention_gpu: GpuClass
    expert_gpu: GpuClass
    attn_durations: Optional[dict] = None  # {"attn_fwd": ns, "single_expert_fwd": ns}
    expert_durations: Optional[dict] = None  # {"expert_layer_fwd": ns}
    comm_durations: Optional[dict] = None  # {"dispatch": ns, "combine": ns}
    non_expert_mem_attention: int = 0
    non_expert_mem_expert: int = 0


@dataclass(frozen=True)
class RunOptions:
    mode: str = "zp-full"
    squeeze: str = "verbatim"
    gamma: Fraction = Fraction(2)
    asym_ea: bool = False
    offload: Optional[tuple] = None  # explicit per-layer plan, overrides asym_ea
    seed: int = 0
    pp_stages: Optional[tuple] = None  # stage GPU roles, e.g. ("attention", "expert")
    sweep_expert_gpu_counts: Optional[tuple] = None
    sweep_seq_lens: Optional[tuple] = None


@dataclass(frozen=True)
class Spec:
    cluster: ZpGroupSpec
    model: ModelSpec
    profile: HardwareProfile
    run: RunOptions = field(default_factory=RunOptions)


# ---------------------------------------------------------------------------
# config parsing


def _require_mapping(obj, context: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context}: expected an object")
    return obj


def _take(data: dict, context: str, required: Sequence[str], optional: Sequence[str] = ()) -> dict:
    unknown = set(data) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"{context}: missing keys {missing}")
    return data


def _int_field(data: dict, key: str, context: str) -> int:
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{context}.{key}: expected an integer, got {value!r}")
    return value


def _time_field(data: dict, key: str, context: str) -> int:
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{context}.{key}: expected a time in ns, got {value!r}")
    return round_ns(as_fraction(value))


def _parse_gpu_class(data: dict, context: str) -> "tuple[GpuClass, Optional[dict]]":
    data = _take(
        _require_mapping(data, context),
        context,
        required=["name", "memory_capacity"],
        optional=["coefficients", "durations"],
    )
    has_coeff = "coefficients" in data
    has_dur = "durations" in data
    if has_coeff == has_dur:
        raise ConfigError(f"{context}: exactly one of 'coefficients' or 'durations' must be present")
    coeffs = {}
    if has_coeff:
        cdata = _take(
            _require_mapping(data["coefficients"], f"{context}.coefficients"),
            f"{context}.coefficients",
            required=[],
            optional=["attn_linear", "attn_quadratic", "expert"],
        )
        coeffs = {
            "attn_coeff_linear": as_fraction(cdata.get("attn_linear", 0)),
            "attn_coeff_quadratic": as_fraction(cdata.get("attn_quadratic", 0)),
            "expert_coeff": as_fraction(cdata.get("expert", 0)),
        }
    gpu = GpuClass(
        name=str(data["name"]),
        memory_capacity=_int_field(data, "memory_capacity", context),
        **coeffs,
    )
    durations = data.get("durations") if has_dur else None
    return gpu, durations


def parse_config(data: dict) -> Spec:
    """Build a validated Spec from a parsed config dict."""
    data = _take(
        _require_mapping(data, "config"),
        "config",
        required=["cluster", "model", "profile"],
        optional=["run"],
    )

    cl = _take(
        _require_mapping(data["cluster"], "cluster"),
        "cluster",
        required=["attention_gpus", "expert_gpus", "link_bandwidth", "bytes_per_token"],
    )
    md = _take(
        _require_mapping(data["model"], "model"),
        "model",
        required=[
            "layers",
            "experts_per_layer",
            "top_k",
            "hidden_dim",
            "seq_len",
            "microbatches",
            "sequences_per_microbatch",
        ],
        optional=["expert_mem", "activation_mem_per_token"],
    )
    pf = _take(
        _require_mapping(data["profile"], "profile"),
        "profile",
        required=["attention_gpu", "expert_gpu"],
        optional=["comm", "non_expert_mem_attention", "non_expert_mem_expert"],
    )

    attn_gpu, attn_durations_raw = _parse_gpu_class(pf["attention_gpu"], "profile.attention_gpu")
    exp_gpu, exp_durations_raw = _parse_gpu_class(pf["expert_gpu"], "profile.expert_gpu")

    attn_durations = None
    if attn_durations_raw is not None:
        d = _take(
            _require_mapping(attn_durations_raw, "profile.attention_gpu.durations"),
            "profile.attention_gpu.durations",
            required=["attn_fwd", "single_expert_fwd"],
        )
        attn_durations = {
            "attn_fwd": _time_field(d, "attn_fwd", "profile.attention_gpu.durations"),
            "single_expert_fwd": _time_field(d, "single_expert_fwd", "profile.attention_gpu.durations"),
        }
    expert_durations = None
    if exp_durations_raw is not None:
        d = _take(
            _require_mapping(exp_durations_raw, "profile.expert_gpu.durations"),
            "profile.expert_gpu.durations",
            required=["expert_layer_fwd"],
        )
        expert_durations = {
            "expert_layer_fwd": _time_field(d, "expert_layer_fwd", "profile.expert_gpu.durations")
        }
    comm_durations = None
    if "comm" in pf:
        d = _take(
            _require_mapping(pf["comm"], "profile.comm"),
            "profile.comm",
            required=["dispatch", "combine"],
        )
        comm_durations = {
            "dispatch": _time_field(d, "dispatch", "profile.comm"),
            "combine": _time_field(d, "combine", "profile.comm"),
        }

    profile = HardwareProfile(
        attention_gpu=attn_gpu,
        expert_gpu=exp_gpu,
        attn_durations=attn_durations,
        expert_durations=expert_durations,
        comm_durations=comm_durations,
        non_expert_mem_attention=(
            _int_field(pf, "non_expert_mem_attention", "profile") if "non_expert_mem_attention" in pf else 0
        ),
        non_expert_mem_expert=(
            _int_field(pf, "non_expert_mem_expert", "profile") if "non_expert_mem_expert" in pf else 0
        ),
    )

    cluster = ZpGroupSpec(
        attention_gpus=_int_field(cl, "attention_gpus", "cluster"),
        expert_gpus=_int_field(cl, "expert_gpus", "cluster"),
        attention_class=attn_gpu,
        expert_class=exp_gpu,
        link_bandwidth=_int_field(cl, "link_bandwidth", "cluster"),
        bytes_per_token=_int_field(cl, "bytes_per_token", "cluster"),
    )

    model = ModelSpec(
        layers=_int_field(md, "layers", "model"),
        experts_per_layer=_int_field(md, "experts_per_layer", "model"),
        top_k=_int_field(md, "top_k", "model"),
        hidden_dim=_int_field(md, "hidden_dim", "model"),
        seq_len=_int_field(md, "seq_len", "model"),
        microbatches=_int_field(md, "microbatches", "model"),
        sequences_per_microbatch=_int_field(md, "sequences_per_microbatch", "model"),
        expert_mem=_int_field(md, "expert_mem", "model") if "expert_mem" in md else 0,
        activation_mem_per_token=(
            _int_field(md, "activation_mem_per_token", "model") if "activation_mem_per_token" in md else 0
        ),
    )

    run = RunOptions()
    if "run" in data:
        rd = _take(
            _require_mapping(data["run"], "run"),
            "run",
            required=[],
            optional=["mode", "squeeze", "gamma", "asym_ea", "offload", "seed", "pp_stages", "sweep"],
        )
        offload = None
        if rd.get("offload") is not None:
            raw = rd["offload"]
            if not isinstance(raw, list) or any(isinstance(o, bool) or not isinstance(o, int) for o in raw):
                raise ConfigError("run.offload: expected a list of integers")
            offload = tuple(raw)
        pp_stages = None
        if rd.get("pp_stages") is not None:
            raw = rd["pp_stages"]
            if not isinstance(raw, list) or any(not isinstance(s, str) for s in raw):
                raise ConfigError("run.pp_stages: expected a list of GPU roles")
            pp_stages = tuple(raw)
        sweep_counts = sweep_seqs = None
        if "sweep" in rd:
            sd = _take(
                _require_mapping(rd["sweep"], "run.sweep"),
                "run.sweep",
                required=["expert_gpu_counts", "seq_lens"],
            )
            sweep_counts = tuple(int(x) for x in sd["expert_gpu_counts"])
            sweep_seqs = tuple(int(x) for x in sd["seq_lens"])
        run = RunOptions(
            mode=str(rd.get("mode", "zp-full")),
            squeeze=str(rd.get("squeeze", "verbatim")),
            gamma=as_fraction(rd.get("gamma", 2.0)),
            asym_ea=bool(rd.get("asym_ea", False)),
            offload=offload,
            seed=int(rd.get("seed", 0)),
            pp_stages=pp_stages,
            sweep_expert_gpu_counts=sweep_counts,
            sweep_seq_lens=sweep_seqs,
        )

    spec = Spec(cluster=cluster, model=model, profile=profile, run=run)
    violations = validate_spec(spec)
    if violations:
        raise ValidationError(violations)
    return spec


def load_config(path) -> Spec:
    """Load, parse and validate a JSON config file."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_config(data)


# ---------------------------------------------------------------------------
# validation


def validate_spec(spec: Spec):
    """Return every violated invariant (empty list means the spec is valid).

    Never raises on a structurally well-formed Spec: violations are data.
    """
    v = []
    cl, md, pf, run = spec.cluster, spec.model, spec.profile, spec.run

    if cl.attention_gpus < 1:
        v.append("cluster.attention_gpus: M must be >= 1")
    if cl.expert_gpus < 1:
        v.append("cluster.expert_gpus: N must be >= 1")
    if cl.bytes_per_token < 0:
        v.append("cluster.bytes_per_token must be >= 0")
    if pf.comm_durations is None and cl.link_bandwidth <= 0:
        v.append("cluster.link_bandwidth must be > 0 when no comm duration table is given")

    for role, gpu, durations in (
        ("attention", pf.attention_gpu, pf.attn_durations),
        ("expert", pf.expert_gpu, pf.expert_durations),
    ):
        if gpu.memory_capacity <= 0:
            v.append(f"profile.{role}_gpu.memory_capacity must be > 0")
        for cname in ("attn_coeff_linear", "attn_coeff_quadratic", "expert_coeff"):
            if getattr(gpu, cname) < 0:
                v.append(f"profile.{role}_gpu.{cname} must be >= 0")
        if durations is not None and any(t < 0 for t in durations.values()):
            v.append(f"profile.{role}_gpu.durations must be >= 0")
    if pf.comm_durations is not None and any(t < 0 for t in pf.comm_durations.values()):
        v.append("profile.comm durations must be >= 0")
    if pf.non_expert_mem_attention < 0 or pf.non_expert_mem_expert < 0:
        v.append("profile.non_expert_mem_* must be >= 0")

    if md.layers < 1:
        v.append("model.layers: L must be >= 1")
    if md.microbatches < 1:
        v.append("model.microbatches: R must be >= 1")
    if md.experts_per_layer < 1:
        v.append("model.experts_per_layer: n must be >= 1")
    if md.top_k < 1:
        v.append("model.top_k: k must be >= 1")
    elif md.top_k > md.experts_per_layer:
        v.append("model.top_k: k must be <= n")
    if md.seq_len < 0:
        v.append("model.seq_len must be >= 0")
    if md.sequences_per_microbatch < 1:
        v.append("model.sequences_per_microbatch must be >= 1")
    if md.hidden_dim < 1:
        v.append("model.hidden_dim must be >= 1")
    if md.expert_mem < 0 or md.activation_mem_per_token < 0:
        v.append("model memory fields must be >= 0")
    if cl.expert_gpus >= 1 and md.experts_per_layer >= 1 and md.experts_per_layer % cl.expert_gpus != 0:
        v.append(
            f"N must divide n: {cl.expert_gpus} expert GPUs cannot evenly hold "
            f"{md.experts_per_layer} experts per layer"
        )

    if run.mode not in MODES:
        v.append(f"run.mode must be one of {MODES}")
    if run.squeeze not in SQUEEZE_MODES:
        v.append(f"run.squeeze must be one of {SQUEEZE_MODES}")
    if run.gamma <= 0:
        v.append("run.gamma must be > 0")

    m, n_gpus = cl.attention_gpus, cl.expert_gpus
    divisible = m >= 1 and n_gpus >= 1 and (m % n_gpus == 0 or n_gpus % m == 0)
    if run.asym_ea and not divisible:
        v.append(
            f"asym_ea requires M % N == 0 or N % M == 0, got M={m}, N={n_gpus}"
        )
    if run.offload is not None and any(o > 0 for o in run.offload) and not divisible:
        v.append(f"explicit offload requires M % N == 0 or N % M == 0, got M={m}, N={n_gpus}")
    if run.mode == "zp-theorem":
        # the theorem schedule assumes every expert stays on an expert GPU
        if run.asym_ea:
            v.append("run.asym_ea needs mode zp-full; zp-theorem keeps all experts on expert GPUs")
        if run.offload is not None and run.offload and run.offload[-1] > 0:
            v.append("zp-theorem mode has no last-layer expert tasks to offload")

    if run.offload is not None and divisible:
        n2 = _chunk_n2(m, n_gpus)
        per_gpu = md.experts_per_layer // n_gpus if n_gpus >= 1 else 0
        if len(run.offload) != md.layers:
            v.append(f"run.offload must have one entry per layer (want {md.layers}, got {len(run.offload)})")
        for idx, o in enumerate(run.offload):
            if o < 0:
                v.append(f"run.offload[{idx}] must be >= 0")
            elif n2 > 0 and o % n2 != 0:
                v.append(f"run.offload[{idx}]={o} is not a multiple of the chunk size n_2={n2}")
            elif o > per_gpu:
                v.append(f"run.offload[{idx}]={o} exceeds the {per_gpu} experts resident per expert GPU")
        if md.expert_mem > 0 and len(run.offload) == md.layers and not v:
            v.extend(_offload_bound_violations(spec))

    if run.pp_stages is not None:
        if len(run.pp_stages) < 2:
            v.append("run.pp_stages needs at least 2 stages")
        if any(s not in ("attention", "expert") for s in run.pp_stages):
            v.append("run.pp_stages entries must be 'attention' or 'expert'")

    return v


def _chunk_n2(m: int, n: int) -> int:
    # mirror of scheduler.chunk_sizes, kept local to avoid an import cycle
    if m % n == 0:
        return m // n
    if n % m == 0:
        return 1
    return 0


def _offload_bound_violations(spec: Spec):
    from .costmodel import memory_bounds  # deferred: costmodel imports core

    try:
        bounds = memory_bounds(spec)
    except Exception as exc:  # validation never aborts; bounds failures are data
        return [f"offload memory bounds cannot be satisfied: {exc}"]
    total = sum(spec.run.offload)
    v = []
    if bounds.n_max is not None and total > bounds.n_max:
        v.append(f"sum(offload)={total} exceeds the attention-side capacity n_max={bounds.n_max}")
    if total < bounds.n_min:
        v.append(f"sum(offload)={total} is below the expert-side requirement n_min={bounds.n_min}")
    return v


# ---------------------------------------------------------------------------
# serialization


def _gamma_number(gamma: Fraction):
    return int(gamma) if gamma.denominator == 1 else float(gamma)


def _coeff_number(c: Fraction):
    return int(c) if c.denominator == 1 else float(c)


def spec_to_config(spec: Spec) -> dict:
    """Inverse of parse_config: a dict that reloads to an equivalent Spec."""
    pf = spec.profile

    def gpu_block(gpu: GpuClass, durations, duration_shape) -> dict:
        block = {"name": gpu.name, "memory_capacity": gpu.memory_capacity}
        if durations is not None:
            block["durations"] = {k: durations[key] for k, key in duration_shape.items()}
        else:
            block["coefficients"] = {
                "attn_linear": _coeff_number(gpu.attn_coeff_linear),
                "attn_quadratic": _coeff_number(gpu.attn_coeff_quadratic),
                "expert": _coeff_number(gpu.expert_coeff),
            }
        return block

    profile = {
        "attention_gpu": gpu_block(
            pf.attention_gpu,
            pf.attn_durations,
            {"attn_fwd": "attn_fwd", "single_expert_fwd": "single_expert_fwd"},
        ),
        "expert_gpu": gpu_block(pf.expert_gpu, pf.expert_durations, {"expert_layer_fwd": "expert_layer_fwd"}),
    }
    if pf.comm_durations is not None:
        profile["comm"] = dict(pf.comm_durations)
    if pf.non_expert_mem_attention:
        profile["non_expert_mem_attention"] = pf.non_expert_mem_attention
    if pf.non_expert_mem_expert:
        profile["non_expert_mem_expert"] = pf.non_expert_mem_expert

    run = {
        "mode": spec.run.mode,
        "squeeze": spec.run.squeeze,
        "gamma": _gamma_number(spec.run.gamma),
        "asym_ea": spec.run.asym_ea,
        "seed": spec.run.seed,
    }
    if spec.run.offload is not None:
        run["offload"] = list(spec.run.offload)
    if spec.run.pp_stages is not None:
        run["pp_stages"] = list(spec.run.pp_stages)
    if spec.run.sweep_expert_gpu_counts is not None:
        run["sweep"] = {
            "expert_gpu_counts": list(spec.run.sweep_expert_gpu_counts),
            "seq_lens": list(spec.run.sweep_seq_lens or ()),
        }

    return {
        "cluster": {
            "attention_gpus": spec.cluster.attention_gpus,
            "expert_gpus": spec.cluster.expert_gpus,
            "link_bandwidth": spec.cluster.link_bandwidth,
            "bytes_per_token": spec.cluster.bytes_per_token,
        },
        "model": {
            "layers": spec.model.layers,
            "experts_per_layer": spec.model.experts_per_layer,
            "top_k": spec.model.top_k,
            "hidden_dim": spec.model.hidden_dim,
            "seq_len": spec.model.seq_len,
            "microbatches": spec.model.microbatches,
            "sequences_per_microbatch": spec.model.sequences_per_microbatch,
            "expert_mem": spec.model.expert_mem,
            "activation_mem_per_token": spec.model.activation_mem_per_token,
        },
        "profile": profile,
        "run": run,
    }


def with_run(spec: Spec, **kwargs) -> Spec:
    """Copy of the spec with run options replaced."""
    return replace(spec, run=replace(spec.run, **kwargs))


def save_config(spec: Spec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec_to_config(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
