"""Deterministic discrete-event execution of a task graph under stream orders."""

import heapq
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .taskgraph import COMPUTE, TaskGraph


class DeadlockError(Exception):
    """Stream orders are inconsistent with the dependency graph."""

    def __init__(self, cycle):
        self.cycle = cycle
        super().__init__(f"deadlock: blocking cycle through tasks {cycle}")


@dataclass
class Timeline:
    """Start/end time per task id, plus the lane sequences that produced it."""

    starts: dict
    ends: dict
    makespan: int
    lanes: dict  # lane -> ordered task ids

    def interval(self, task_id: int):
        return self.starts[task_id], self.ends[task_id]


def simulate(graph: TaskGraph, orders: dict) -> Timeline:
    """List-scheduling semantics.

    Each task starts at the max of its lane predecessor's end and all
    dependency ends; ties in event processing are broken by task id, so
    identical inputs always produce identical timelines. Orders must cover
    every task exactly once on its own lane.
    """
    placed = {}
    for lane, sequence in orders.items():
        for tid in sequence:
            if tid in placed:
                raise ValueError(f"task {tid} appears on more than one lane")
            placed[tid] = lane
    for t in graph.tasks:
        if t.id not in placed:
            raise ValueError(f"task {t.id} ({t.kind.value} L{t.layer} M{t.microbatch}) missing from orders")
        if placed[t.id] != t.lane:
            raise ValueError(f"task {t.id} placed on lane {placed[t.id]}, belongs to {t.lane}")

    preds = {t.id: list(graph.predecessors(t.id)) for t in graph.tasks}
    for lane, sequence in orders.items():
        for prev, nxt in zip(sequence, sequence[1:]):
            preds[nxt].append(prev)

    indegree = {tid: len(ps) for tid, ps in preds.items()}
    succ = {t.id: [] for t in graph.tasks}
    for tid, ps in preds.items():
        for p in ps:
            succ[p].append(tid)

    starts, ends = {}, {}
    ready = sorted(tid for tid, d in indegree.items() if d == 0)
    heapq.heapify(ready)
    done = 0
    while ready:
        tid = heapq.heappop(ready)
        task = graph.tasks[tid]
        start = max((ends[p] for p in preds[tid]), default=0)
        starts[tid] = start
        ends[tid] = start + task.duration
        done += 1
        for s in succ[tid]:
            indegree[s] -= 1
            if indegree[s] == 0:
                heapq.heappush(ready, s)

    if done != len(graph.tasks):
        blocked = sorted(tid for tid, d in indegree.items() if d > 0)
        cycle = _find_cycle(blocked, preds)
        raise DeadlockError(cycle)

    makespan = max(ends.values(), default=0)
    return Timeline(starts=starts, ends=ends, makespan=makespan, lanes={k: list(v) for k, v in orders.items()})


def _find_cycle(blocked, preds):
    blocked_set = set(blocked)
    start = blocked[0]
    seen = {}
    node = start
    path = []
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = next(p for p in preds[node] if p in blocked_set)
    return path[seen[node]:]


def validate_timeline(graph: TaskGraph, timeline: Timeline):
    """Exhaustive constraint check; the empty list means the timeline is valid."""
    v = []
    for t in graph.tasks:
        if timeline.ends[t.id] - timeline.starts[t.id] != t.duration:
            v.append(f"task {t.id}: end - start != duration")
    for u, w in graph.edges:
        if timeline.starts[w] < timeline.ends[u]:
            v.append(f"dependency violated: task {w} starts before task {u} ends")
    for lane, sequence in timeline.lanes.items():
        for prev, nxt in zip(sequence, sequence[1:]):
            if timeline.starts[nxt] < timeline.ends[prev]:
                v.append(f"lane {lane}: task {nxt} overlaps task {prev}")
    actual = max(timeline.ends.values(), default=0)
    if timeline.makespan != actual:
        v.append(f"makespan {timeline.makespan} != last end {actual}")
    return v


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class DeviceMetrics:
    busy: int
    first_start: int
    last_end: int
    bubble_total: int  # idle inside [first_start, last_end]
    drain_wait: int  # idle from last_end to the iteration's makespan
    utilization: Fraction  # busy / active window
    utilization_of_makespan: Fraction

    @property
    def active_window(self) -> int:
        return self.last_end - self.first_start

    @property
    def bubble_to_end(self) -> int:
        """Idle from first start through the end of the iteration."""
        return self.bubble_total + self.drain_wait


@dataclass
class Metrics:
    iteration_time: int
    throughput_tokens_per_ns: Optional[Fraction]
    devices: dict  # device -> DeviceMetrics (compute lane)
    steady_state_utilization: Optional[Fraction] = None


def _compute_lane_stats(graph, timeline, device, makespan) -> DeviceMetrics:
    tasks = [t for t in graph.tasks if t.device == device and t.lane[1] == COMPUTE]
    if not tasks:
        return DeviceMetrics(0, 0, 0, 0, makespan, Fraction(0), Fraction(0))
    intervals = sorted((timeline.starts[t.id], timeline.ends[t.id]) for t in tasks)
    busy = sum(e - s for s, e in intervals)
    first = intervals[0][0]
    last = max(e for _, e in intervals)
    window = last - first
    bubble = window - busy  # lane tasks never overlap, so gaps are pure idle
    return DeviceMetrics(
        busy=busy,
        first_start=first,
        last_end=last,
        bubble_total=bubble,
        drain_wait=makespan - last,
        utilization=Fraction(busy, window) if window else Fraction(0),
        utilization_of_makespan=Fraction(busy, makespan) if makespan else Fraction(0),
    )


def compute_metrics(
    graph: TaskGraph,
    timeline: Timeline,
    tokens_per_iteration: Optional[int] = None,
    steady_window: Optional[tuple] = None,
    steady_device: str = "attn",
) -> Metrics:
    """Utilization over each device's active window plus bubble accounting.

    `steady_window` = (first_layer, last_layer) measures utilization over the
    middle layers only, excluding warm-up and drain.
    """
    makespan = timeline.makespan
    devices = {}
    for device in ("attn", "exp"):
        devices[device] = _compute_lane_stats(graph, timeline, device, makespan)
    throughput = None
    if tokens_per_iteration is not None and makespan > 0:
        throughput = Fraction(tokens_per_iteration, makespan)
    steady = None
    if steady_window is not None:
        steady = steady_state_utilization(graph, timeline, steady_device, steady_window)
    return Metrics(
        iteration_time=makespan,
        throughput_tokens_per_ns=throughput,
        devices=devices,
        steady_state_utilization=steady,
    )


def steady_state_utilization(graph: TaskGraph, timeline: Timeline, device: str, layer_window: tuple) -> Fraction:
    """Compute-lane utilization restricted to tasks of the given layer range."""
    lo, hi = layer_window
    tasks = [
        t
        for t in graph.tasks
        if t.device == device and t.lane[1] == COMPUTE and lo <= t.layer <= hi
    ]
    if not tasks:
        return Fraction(0)
    busy = sum(t.duration for t in tasks)
    first = min(timeline.starts[t.id] for t in tasks)
    last = max(timeline.ends[t.id] for t in tasks)
    return Fraction(busy, last - first) if last > first else Fraction(0)


def bubble_intervals(graph: TaskGraph, timeline: Timeline, lane) -> list:
    """Idle gaps inside the lane's active window."""
    ids = timeline.lanes.get(lane, [])
    intervals = sorted((timeline.starts[t], timeline.ends[t]) for t in ids)
    gaps = []
    for (s1, e1), (s2, e2) in zip(intervals, intervals[1:]):
        if s2 > e1:
            gaps.append((e1, s2))
    return gaps


# ---------------------------------------------------------------------------
# Chrome Trace Event Format export

_DEVICE_PIDS = {"attn": 1, "exp": 2}
_STREAM_TIDS = {"compute": 1, "dispatch": 2, "combine": 3}


def export_trace(graph: TaskGraph, timeline: Timeline, path) -> None:
    """Chrome Trace Event Format: one track per (device, lane), complete
    events with microsecond timestamps."""
    events = []
    for device, pid in _DEVICE_PIDS.items():
        events.append(
            {"name": "process_name", "ph": "M", "pid": pid, "args": {"name": f"{device} GPU"}}
        )
        for stream, tid in _STREAM_TIDS.items():
            events.append(
                {
                    "name": "thread_name",
                    "ph": "M",
                    "pid": pid,
                    "tid": tid,
                    "args": {"name": f"{stream} stream"},
                }
            )
    for t in graph.tasks:
        events.append(
            {
                "name": f"{t.kind.value} L{t.layer} M{t.microbatch}",
                "ph": "X",
                "ts": timeline.starts[t.id] / 1000.0,
                "dur": t.duration / 1000.0,
                "pid": _DEVICE_PIDS[t.device],
                "tid": _STREAM_TIDS[t.lane[1]],
                "args": {"kind": t.kind.value, "layer": t.layer, "microbatch": t.microbatch},
            }
        )
    with open(path, "w") as fh:
        json.dump(events, fh, indent=1)
        fh.write("\n")


def load_trace_intervals(path) -> dict:
    """Rebuild {(kind, layer, microbatch): (start_ns, end_ns)} from a trace file."""
    with open(path) as fh:
        events = json.load(fh)
    intervals = {}
    for ev in events:
        if ev.get("ph") != "X":
            continue
        key = (ev["args"]["kind"], ev["args"]["layer"], ev["args"]["microbatch"])
        start = round(ev["ts"] * 1000)
        end = round((ev["ts"] + ev["dur"]) * 1000)
        intervals[key] = (start, end)
    return intervals
