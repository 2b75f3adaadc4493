"""Event-driven multi-tenant GPU cluster simulation with elastic,
deadline-aware allocation.

Two operating points share one scheduling policy and differ only in their
throughput curves: Baseline fixes each model's tensor/pipeline degrees at a
configured minimum and scales data parallelism only, while Optimal may use
the best valid (t, d, p) plan at every GPU count.  Deadlines are derived
from the Optimal curves in both modes so the comparison is not confounded.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import random
from bisect import bisect_right
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

from .core import HardwareSpec, ModelConfig, ParallelPlan, memory_per_gpu
from .costdb import CostDatabase
from .errors import ConfigError, SimulationError
from .explorer import iter_time_for_plan, tensor_degrees

DEFAULT_TOTAL_GPUS = 1024


class Mode(str, Enum):
    BASELINE = "baseline"
    OPTIMAL = "optimal"


class JobState(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    TERMINATED = "terminated"


@dataclass(frozen=True)
class CatalogEntry:
    """One schedulable model: architecture, its training batch, and the
    minimum tensor/pipeline degrees the baseline scaler keeps fixed."""

    model: ModelConfig
    global_batch: int
    baseline_tensor: int
    baseline_pipeline: int
    micro_batch: int = 1

    @property
    def id(self) -> str:
        return self.model.name


def builtin_catalog() -> list[CatalogEntry]:
    """The three cluster-experiment models (18.4B / 39.1B / 81.2B)."""
    return [
        CatalogEntry(ModelConfig("gpt-18.4b", 6144, 40, 48, 2048), 1024, 8, 1, micro_batch=4),
        CatalogEntry(ModelConfig("gpt-39.1b", 8192, 48, 64, 2048), 1536, 8, 2, micro_batch=4),
        CatalogEntry(ModelConfig("gpt-81.2b", 10240, 64, 80, 2048), 1792, 8, 4, micro_batch=2),
    ]


def load_catalog(path: str) -> list[CatalogEntry]:
    import json

    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    entries = []
    for i, row in enumerate(doc.get("models", [])):
        try:
            entries.append(
                CatalogEntry(
                    model=ModelConfig(
                        name=str(row["id"]),
                        hidden_size=int(row["hidden_size"]),
                        num_layers=int(row["num_layers"]),
                        num_heads=int(row["num_heads"]),
                        seq_len=int(row["seq_len"]),
                        vocab_size=int(row.get("vocab_size", 51_200)),
                    ),
                    global_batch=int(row["global_batch"]),
                    baseline_tensor=int(row["baseline_tensor"]),
                    baseline_pipeline=int(row["baseline_pipeline"]),
                    micro_batch=int(row.get("micro_batch", 1)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: models[{i}]: {exc}") from exc
    if not entries:
        raise ConfigError(f"{path}: catalog has no models")
    return entries


class ThroughputCurve:
    """Iterations/second as a function of allocated GPUs, defined only at
    GPU counts where a valid plan exists; queries below the smallest point
    return zero throughput, queries between points use the best point not
    exceeding the allocation."""

    def __init__(self, model_id: str, mode: Mode, points: dict[int, tuple[float, ParallelPlan]]):
        if not points:
            raise SimulationError(f"model {model_id!r} has no valid plan at any GPU count")
        self.model_id = model_id
        self.mode = mode
        self.points = points
        self._sizes = sorted(points)
        best_tput, best_size = 0.0, 0
        self._effective: list[tuple[int, float]] = []  # per size: best (point, tput) so far
        for size in self._sizes:
            tput = points[size][0]
            if tput > best_tput:
                best_tput, best_size = tput, size
            self._effective.append((best_size, best_tput))

    def min_gpus(self) -> int:
        return self._sizes[0]

    def usable_point(self, gpus: int) -> tuple[int, float]:
        """(curve point, iterations/s) actually used under an allocation of
        ``gpus``; (0, 0.0) when even the smallest point does not fit."""
        i = bisect_right(self._sizes, gpus)
        if i == 0:
            return (0, 0.0)
        return self._effective[i - 1]

    def next_improvement(self, gpus: int) -> tuple[int, float] | None:
        """Smallest curve point above ``gpus`` with strictly better
        throughput, or None."""
        _, cur = self.usable_point(gpus)
        for size in self._sizes[bisect_right(self._sizes, gpus):]:
            tput = self.points[size][0]
            if tput > cur:
                return (size, tput)
        return None

    def min_gpus_for_rate(self, iters_per_sec: float) -> int | None:
        """Smallest curve point sustaining at least the given rate."""
        for size in self._sizes:
            if self.points[size][0] >= iters_per_sec:
                return size
        return None

    def max_throughput(self, total_gpus: int) -> float:
        _, tput = self.usable_point(total_gpus)
        return tput


@dataclass
class Job:
    id: int
    model_id: str
    iterations: int
    arrival: float
    deadline_factor: float
    state: JobState = JobState.PENDING
    progress: float = 0.0
    deadline: float = math.inf
    completion: float = math.inf
    alloc: int = 0
    intervals: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def jct(self) -> float:
        return self.completion - self.arrival


@dataclass
class ScheduleResult:
    mode: Mode
    deadline_mode: bool
    jobs: list[Job]
    total_gpus: int

    def completed(self) -> list[Job]:
        return [j for j in self.jobs if j.state is JobState.COMPLETED]


def metrics(result: ScheduleResult) -> tuple[float, float, float]:
    """(deadline_ratio, average JCT over completed jobs, makespan)."""
    jobs = result.jobs
    if not jobs:
        return (0.0, 0.0, 0.0)
    met = sum(
        1 for j in jobs if j.state is JobState.COMPLETED and j.completion <= j.deadline * (1 + 1e-9)
    )
    done = result.completed()
    avg_jct = sum(j.jct for j in done) / len(done) if done else 0.0
    makespan = max((j.completion for j in done), default=0.0) - min(j.arrival for j in jobs)
    return (met / len(jobs), avg_jct, max(makespan, 0.0))


# ---------------------------------------------------------------------------
# Throughput curves
# ---------------------------------------------------------------------------

_CURVE_WORKER: dict = {}


def _curve_init(model, db):
    _CURVE_WORKER.update(model=model, db=db)


def _curve_eval(plan: ParallelPlan):
    try:
        return iter_time_for_plan(_CURVE_WORKER["model"], plan, _CURVE_WORKER["db"])
    except Exception:
        return None


def _candidate_plans(
    entry: CatalogEntry,
    hw: HardwareSpec,
    mode: Mode,
    total_gpus: int,
    t_max: int,
    memory_screen: bool,
) -> list[ParallelPlan]:
    model, batch = entry.model, entry.global_batch
    plans = []
    if mode is Mode.BASELINE:
        t, p = entry.baseline_tensor, entry.baseline_pipeline
        t_vals, p_vals = [t], [p]
    else:
        t_vals = tensor_degrees(model, min(t_max, total_gpus))
        p_vals = None
    for t in t_vals:
        ps = p_vals if p_vals is not None else range(1, min(model.num_layers, total_gpus // t) + 1)
        for p in ps:
            for d in range(1, total_gpus // (t * p) + 1):
                if batch % (d * entry.micro_batch) != 0:
                    continue
                plan = ParallelPlan(
                    tensor=t, data=d, pipeline=p,
                    global_batch=batch, micro_batch=entry.micro_batch,
                )
                if plan.violations(model):
                    continue
                if memory_screen and memory_per_gpu(model, plan) > hw.gpu_mem_bytes:
                    continue
                plans.append(plan)
    return plans


def build_curves(
    catalog: list[CatalogEntry],
    hw: HardwareSpec,
    db: CostDatabase,
    mode: Mode,
    total_gpus: int = DEFAULT_TOTAL_GPUS,
    t_max: int = 16,
    memory_screen: bool = True,
    parallel: int | None = None,
) -> dict[str, ThroughputCurve]:
    """Pre-measured throughput (iterations/second) per model and GPU count.

    Baseline varies only the data-parallel degree at the catalog's fixed
    (t, p); Optimal keeps, for every exact GPU count, the fastest valid plan.
    """
    if parallel is None:
        parallel = os.cpu_count() or 1
    curves = {}
    for entry in catalog:
        plans = _candidate_plans(entry, hw, mode, total_gpus, t_max, memory_screen)
        if parallel > 1 and len(plans) > 32:
            with ProcessPoolExecutor(
                max_workers=parallel, initializer=_curve_init, initargs=(entry.model, db)
            ) as pool:
                times = list(pool.map(_curve_eval, plans, chunksize=max(1, len(plans) // (parallel * 8))))
        else:
            _curve_init(entry.model, db)
            times = [_curve_eval(plan) for plan in plans]
        points: dict[int, tuple[float, ParallelPlan]] = {}
        for plan, iter_time in zip(plans, times):
            if iter_time is None:
                continue
            g = plan.gpus
            tput = 1.0 / iter_time
            if g not in points or tput > points[g][0]:
                points[g] = (tput, plan)
        curves[entry.id] = ThroughputCurve(entry.id, mode, points)
    return curves


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


def load_trace(path: str) -> list[Job]:
    """Jobs from a CSV of (job_id, arrival_s, model_id, iterations, lambda),
    sorted by arrival; malformed rows and out-of-range deadline factors are
    reported with their line number."""
    jobs = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        required = {"job_id", "arrival_s", "model_id", "iterations", "lambda"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ConfigError(f"{path}: header must contain {sorted(required)}")
        for line, row in enumerate(reader, start=2):
            try:
                lam = float(row["lambda"])
                if not (0.5 <= lam <= 1.5):
                    raise ValueError(f"lambda {lam} outside [0.5, 1.5]")
                jobs.append(
                    Job(
                        id=int(row["job_id"]),
                        model_id=row["model_id"],
                        iterations=int(row["iterations"]),
                        arrival=float(row["arrival_s"]),
                        deadline_factor=lam,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{line}: {exc}") from exc
    jobs.sort(key=lambda j: (j.arrival, j.id))
    return jobs


def save_trace(path: str, jobs: list[Job]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["job_id", "arrival_s", "model_id", "iterations", "lambda"])
        for j in jobs:
            w.writerow([j.id, j.arrival, j.model_id, j.iterations, j.deadline_factor])


def synthesize_trace(
    model_ids: list[str],
    n_jobs: int,
    seed: int,
    window_hours: float = 150.0,
    iterations_range: tuple[int, int] = (200, 2000),
    all_at_once: bool = False,
) -> list[Job]:
    """Seeded synthetic arrivals: exponential inter-arrival times scaled so
    all jobs land inside the window, uniform model choice, uniform iteration
    counts, deadline factors uniform in [0.5, 1.5]."""
    rng = random.Random(seed)
    gaps = [rng.expovariate(1.0) for _ in range(n_jobs)]
    scale = (window_hours * 3600.0) / sum(gaps) if gaps else 0.0
    arrivals: list[float] = []
    now = 0.0
    for gap in gaps:
        now += gap * scale
        arrivals.append(0.0 if all_at_once else now)
    jobs = [
        Job(
            id=i,
            model_id=rng.choice(model_ids),
            iterations=rng.randint(*iterations_range),
            arrival=arrivals[i],
            deadline_factor=rng.uniform(0.5, 1.5),
        )
        for i in range(n_jobs)
    ]
    jobs.sort(key=lambda j: (j.arrival, j.id))
    return jobs


# ---------------------------------------------------------------------------
# Scheduler
# ---------------------------------------------------------------------------


def run_schedule(
    jobs: list[Job],
    curves: dict[str, ThroughputCurve],
    total_gpus: int = DEFAULT_TOTAL_GPUS,
    deadline_mode: bool = True,
    deadline_reference: dict[str, ThroughputCurve] | None = None,
) -> ScheduleResult:
    """Event-driven elastic scheduling over one trace.

    At every arrival or completion: admission (deadline mode) rejects a new
    job unless every admitted unfinished job can still be granted the
    smallest GPU count meeting its deadline; each admitted job then gets that
    minimum (or the curve minimum in deadline-free mode, FIFO), and surplus
    GPUs go to whichever job gains the most throughput per added GPU.
    Reallocation is instantaneous and lossless.
    """
    for job in jobs:
        if job.model_id not in curves:
            raise SimulationError(f"job {job.id}: no throughput curve for model {job.model_id!r}")
    reference = deadline_reference or curves

    # private copies: one trace can be replayed under several curve sets
    jobs = sorted((dataclasses.replace(j) for j in jobs), key=lambda j: (j.arrival, j.id))
    for job in jobs:
        job.state = JobState.PENDING
        job.progress = 0.0
        job.completion = math.inf
        job.alloc = 0
        job.intervals = []
        ref = reference[job.model_id]
        ideal = job.iterations / ref.max_throughput(total_gpus)
        job.deadline = job.arrival + job.deadline_factor * ideal

    active: list[Job] = []  # admitted, unfinished, in FIFO order
    pending = list(jobs)
    now = 0.0

    def min_deadline_gpus(job: Job, at: float) -> int | None:
        slack = job.deadline - at
        if slack <= 0:
            return None
        need_rate = (job.iterations - job.progress) / slack
        return curves[job.model_id].min_gpus_for_rate(need_rate)

    def reallocate(at: float) -> None:
        free = total_gpus
        for job in active:
            job.alloc = 0
        if deadline_mode:
            for job in active:
                need = min_deadline_gpus(job, at)
                if need is not None and need <= free:
                    job.alloc = need
                    free -= need
        else:
            for job in active:  # FIFO minimum grants
                need = curves[job.model_id].min_gpus()
                if need <= free:
                    job.alloc = need
                    free -= need
        # greedy surplus: best marginal throughput gain per GPU
        while True:
            best_gain, best_job, best_point = 0.0, None, 0
            for job in active:
                nxt = curves[job.model_id].next_improvement(job.alloc)
                if nxt is None:
                    continue
                size, tput = nxt
                extra = size - job.alloc
                if extra > free:
                    continue
                _, cur = curves[job.model_id].usable_point(job.alloc)
                gain = (tput - cur) / extra
                if gain > best_gain + 1e-15:
                    best_gain, best_job, best_point = gain, job, size
            if best_job is None:
                break
            free -= best_point - best_job.alloc
            best_job.alloc = best_point
        for job in active:
            job.state = JobState.RUNNING if job.alloc > 0 else JobState.PENDING

    def rate(job: Job) -> float:
        _, tput = curves[job.model_id].usable_point(job.alloc)
        return tput

    i_arrival = 0
    while i_arrival < len(pending) or active:
        next_arrival = pending[i_arrival].arrival if i_arrival < len(pending) else math.inf
        next_completion = math.inf
        projection: dict[int, float] = {}
        for job in active:
            r = rate(job)
            if r > 0:
                proj = now + (job.iterations - job.progress) / r
                projection[job.id] = proj
                next_completion = min(next_completion, proj)
        t_next = min(next_arrival, next_completion)
        if t_next is math.inf:
            raise SimulationError("scheduler stalled: active jobs but no progress possible")
        if t_next < now:  # float slop in a projection
            t_next = now

        # integrate progress over [now, t_next]
        if t_next > now:
            for job in active:
                r = rate(job)
                if r > 0:
                    job.progress += r * (t_next - now)
                    job.intervals.append((now, t_next, r))
        now = t_next

        # completing by projected time (not by accumulated progress) keeps
        # the loop live even when the remaining time is below float ulp
        changed = False
        still_active = []
        for job in active:
            if projection.get(job.id, math.inf) <= t_next:
                job.progress = float(job.iterations)
                job.state = JobState.COMPLETED
                job.completion = now
                changed = True
            else:
                still_active.append(job)
        active = still_active

        while i_arrival < len(pending) and pending[i_arrival].arrival <= now:
            job = pending[i_arrival]
            i_arrival += 1
            changed = True
            if deadline_mode:
                need_new = min_deadline_gpus(job, now)
                if need_new is None:
                    job.state = JobState.TERMINATED
                    continue
                budget = total_gpus - need_new
                feasible = True
                for other in active:
                    need = min_deadline_gpus(other, now)
                    if need is None or need > budget:
                        feasible = False
                        break
                    budget -= need
                if not feasible:
                    job.state = JobState.TERMINATED
                    continue
            active.append(job)

        if changed:
            reallocate(now)

    mode = next(iter(curves.values())).mode if curves else Mode.OPTIMAL
    return ScheduleResult(mode=mode, deadline_mode=deadline_mode, jobs=jobs, total_gpus=total_gpus)
