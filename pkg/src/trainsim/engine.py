"""Discrete-event execution of task graphs, a brute-force timing oracle, and
the roll-up from single-iteration time to end-to-end days, utilization, and
dollars.

The simulation keeps one timeline per (device, stream): tasks are fetched
from a FIFO ready queue (ties broken by ascending task id), started no
earlier than both their stream's timeline and their parents' completion, and
their completion is propagated into each child's earliest start.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

from .core import (
    SECONDS_PER_DAY,
    TrainingRun,
    dollar_cost,
    flops_per_iteration,
    tokens_per_iteration,
)
from .errors import SimulationError
from .opgraph import COMM, COMPUTE, TaskGraph

# timeline entries: (device, stream, label, start, end)
TimelineEntry = tuple[int, int, str, float, float]


@dataclass
class SimResult:
    iter_time: float
    per_device_busy: dict[int, tuple[float, float]] = field(default_factory=dict)
    end_to_end_days: float = 0.0
    utilization: float = 0.0
    dollars: float = 0.0
    timeline: list[TimelineEntry] | None = None


def simulate_iteration(tg: TaskGraph, want_timeline: bool = False) -> SimResult:
    """Run the task graph to completion and return the makespan.

    Deterministic: initial ready tasks enter the queue in ascending id order
    and children are stored sorted, so FIFO ties always resolve identically.
    Raises SimulationError (naming a stuck task) if the graph has a cycle.
    """
    n = len(tg)
    duration = tg.duration
    device = tg.device
    stream = tg.stream
    child_off = tg.child_off
    child_idx = tg.child_idx
    indeg = tg.indeg.copy()
    ready = [0.0] * n
    n_slots = tg.num_devices * 2
    timelines = [0.0] * n_slots
    busy = [0.0] * n_slots
    labels = tg.labels if want_timeline else None
    timeline: list[TimelineEntry] | None = [] if want_timeline else None

    # FIFO queue as a list with a read head: cheaper than deque here
    q = [i for i in range(n) if indeg[i] == 0]
    push = q.append
    head = 0
    while head < len(q):
        u = q[head]
        head += 1
        slot = device[u] * 2 + stream[u]
        start = timelines[slot]
        r = ready[u]
        if r > start:
            start = r
        dur = duration[u]
        end = start + dur
        timelines[slot] = end
        busy[slot] += dur
        if timeline is not None:
            timeline.append((device[u], stream[u], labels[u] if labels else "", start, end))
        for c in child_idx[child_off[u] : child_off[u + 1]]:
            if ready[c] < end:
                ready[c] = end
            nd = indeg[c] - 1
            indeg[c] = nd
            if nd == 0:
                push(c)

    processed = head
    if processed < n:
        stuck = next(i for i in range(n) if indeg[i] > 0)
        raise SimulationError(
            f"cycle detected: task {stuck} (device {device[stuck]}) never became ready"
        )

    per_device = {
        dev: (busy[dev * 2 + COMPUTE], busy[dev * 2 + COMM]) for dev in range(tg.num_devices)
    }
    iter_time = max(timelines) if timelines else 0.0
    return SimResult(iter_time=iter_time, per_device_busy=per_device, timeline=timeline)


def brute_force_makespan(tg: TaskGraph, limit: int = 200) -> float:
    """Independent oracle: serialize each (device, stream) in the FIFO pop
    order, then evaluate the longest path of the chained DAG.  Must equal
    simulate_iteration wherever both run."""
    n = len(tg)
    if n > limit:
        raise SimulationError(f"brute-force oracle limited to {limit} tasks, got {n}")
    if n == 0:
        return 0.0

    # pop order is purely structural (durations never consulted)
    indeg = tg.indeg.copy()
    q = deque(i for i in range(n) if indeg[i] == 0)
    pop_order = []
    while q:
        u = q.popleft()
        pop_order.append(u)
        for c in tg.children(u):
            indeg[c] -= 1
            if indeg[c] == 0:
                q.append(c)
    if len(pop_order) < n:
        raise SimulationError("cycle detected in oracle traversal")

    parents = tg.parents_lists()
    last_on_slot: dict[tuple[int, int], int] = {}
    for u in pop_order:
        slot = (tg.device[u], tg.stream[u])
        prev = last_on_slot.get(slot)
        if prev is not None:
            parents[u].append(prev)
        last_on_slot[slot] = u

    finish = [0.0] * n
    for u in pop_order:
        start = 0.0
        for par in parents[u]:
            if finish[par] > start:
                start = finish[par]
        finish[u] = start + tg.duration[u]
    return max(finish)


def end_to_end(
    run: TrainingRun,
    iter_time: float,
    multiplier: int = 6,
    base: SimResult | None = None,
) -> SimResult:
    """Scale one iteration out to the full token budget: wall-clock days,
    aggregate GPU utilization under the multiplier*N*T convention, and the
    dollar bill at the hardware's hourly rate."""
    if iter_time <= 0:
        raise SimulationError(f"iter_time must be positive, got {iter_time}")
    iterations = run.iterations
    gpus = run.plan.gpus
    wall = iter_time * iterations
    flops = flops_per_iteration(run.model, tokens_per_iteration(run.plan, run.model), multiplier)
    return SimResult(
        iter_time=iter_time,
        per_device_busy=base.per_device_busy if base else {},
        end_to_end_days=wall / SECONDS_PER_DAY,
        utilization=flops / (iter_time * gpus * run.hw.peak_flops),
        dollars=dollar_cost(wall, gpus, run.hw.dollars_per_gpu_hour),
        timeline=base.timeline if base else None,
    )


def export_timeline_csv(timeline: list[TimelineEntry], path: str) -> None:
    """Gantt-ready dump: one row per task occurrence, microsecond units."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device", "stream", "task_label", "start_us", "end_us"])
        for dev, stream, label, start, end in timeline:
            w.writerow([dev, "compute" if stream == COMPUTE else "comm", label, start * 1e6, end * 1e6])


def peak_inflight_forwards(timeline: list[TimelineEntry], device: int) -> int:
    """Peak number of micro-batches on ``device`` whose forward has started
    but whose backward has not yet finished, measured from the trace."""
    fwd_start: dict[int, float] = {}
    bwd_end: dict[int, float] = {}
    for dev, _stream, label, start, end in timeline:
        if dev != device or ":mb" not in label:
            continue
        mb = int(label.split(":mb", 1)[1].split(":", 1)[0])
        if label.startswith("Fwd"):
            fwd_start[mb] = min(fwd_start.get(mb, start), start)
        elif label.startswith("Bwd"):
            bwd_end[mb] = max(bwd_end.get(mb, end), end)
    events: list[tuple[float, int]] = []
    for mb, fs in fwd_start.items():
        if mb in bwd_end:
            events.append((fs, 1))
            events.append((bwd_end[mb], -1))
    events.sort(key=lambda e: (e[0], e[1]))  # process interval ends first
    peak = cur = 0
    for _, delta in events:
        cur += delta
        peak = max(peak, cur)
    return peak
