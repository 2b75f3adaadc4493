"""Design-space exploration: enumerate (t, d, p) plans, simulate each, rank
by cost; pick cost-effective plans against GPU-budget baselines; and size
compute-optimal models under effective (not peak) throughput."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .core import (
    HardwareSpec,
    ModelConfig,
    ParallelPlan,
    Schedule,
    TrainingRun,
    memory_per_gpu,
    param_count,
)
from .costdb import CostDatabase
from .engine import end_to_end, simulate_iteration
from .errors import SimulationError
from .opgraph import build_stage_task_graph

# Chinchilla scaling-law constants: N = 0.089 * sqrt(C), T = 1.875 * sqrt(C)
CHINCHILLA_PARAM_COEF = 0.089
CHINCHILLA_TOKEN_COEF = 1.875
# Table convention: each parameter wants 20 training tokens
TOKENS_PER_PARAM = 20.0

HEAD_DIM = 128  # attention-head width used when a grid gives only (h, L)


@dataclass(frozen=True)
class SweepPoint:
    plan: ParallelPlan
    iter_time: float
    days: float
    utilization: float
    gpus: int
    dollars_per_hour: float
    dollars_total: float


@dataclass(frozen=True)
class SkippedPlan:
    tensor: int
    data: int
    pipeline: int
    reason: str


@dataclass(frozen=True)
class ChinchillaPoint:
    hidden_size: int
    num_layers: int
    params: float
    tokens: float
    best_plan: ParallelPlan | None
    iter_time: float
    est_days: float
    feasible: bool


@dataclass(frozen=True)
class ChinchillaResult:
    points: list[ChinchillaPoint]  # sorted by params descending
    best: ChinchillaPoint | None  # largest feasible model
    diagnostics: str = ""


def tensor_degrees(model: ModelConfig, t_max: int) -> list[int]:
    """Tensor degrees that split attention heads and hidden size evenly."""
    return [
        t
        for t in range(1, t_max + 1)
        if model.num_heads % t == 0 and model.hidden_size % t == 0
    ]


def iter_time_for_plan(model: ModelConfig, plan: ParallelPlan, db: CostDatabase) -> float:
    """Single-iteration time of one plan via the stage-aggregated graph."""
    return simulate_iteration(build_stage_task_graph(model, plan, db)).iter_time


def enumerate_plans(
    model: ModelConfig,
    bounds: tuple[int, int, int],
    global_batch: int,
    micro_batch: int = 1,
    schedule: Schedule = Schedule.ONE_F_ONE_B,
    grad_buckets: int = 1,
) -> tuple[list[ParallelPlan], list[SkippedPlan]]:
    """All candidate (t, d, p) triples inside the bounds, split into valid
    plans and skipped triples with the violated invariant."""
    t_max, d_max, p_max = bounds
    if min(t_max, d_max, p_max) < 1:
        raise SimulationError(f"sweep bounds must be >= 1, got {bounds}")
    plans: list[ParallelPlan] = []
    skipped: list[SkippedPlan] = []
    for t in range(1, t_max + 1):
        for d in range(1, d_max + 1):
            for p in range(1, p_max + 1):
                if global_batch % d != 0:
                    skipped.append(SkippedPlan(t, d, p, f"data degree {d} does not divide global_batch {global_batch}"))
                    continue
                try:
                    plan = ParallelPlan(
                        tensor=t, data=d, pipeline=p,
                        global_batch=global_batch, micro_batch=int(micro_batch),
                        schedule=schedule, grad_buckets=grad_buckets,
                    )
                except Exception as exc:  # degenerate sizes
                    skipped.append(SkippedPlan(t, d, p, str(exc)))
                    continue
                problems = plan.violations(model)
                if problems:
                    skipped.append(SkippedPlan(t, d, p, "; ".join(problems)))
                else:
                    plans.append(plan)
    return plans, skipped


# -- worker state for the parallel sweep ------------------------------------

_WORKER: dict = {}


def _sweep_init(model, hw, db, tokens, iterations_override, multiplier):
    _WORKER.update(
        model=model, hw=hw, db=db, tokens=tokens,
        iterations_override=iterations_override, multiplier=multiplier,
    )


def _sweep_eval(plan: ParallelPlan):
    model, hw, db = _WORKER["model"], _WORKER["hw"], _WORKER["db"]
    try:
        iter_time = iter_time_for_plan(model, plan, db)
        run = TrainingRun(
            model=model, plan=plan, hw=hw,
            total_tokens=_WORKER["tokens"],
            iterations_override=_WORKER["iterations_override"],
        )
        res = end_to_end(run, iter_time, multiplier=_WORKER["multiplier"])
        return SweepPoint(
            plan=plan,
            iter_time=iter_time,
            days=res.end_to_end_days,
            utilization=res.utilization,
            gpus=plan.gpus,
            dollars_per_hour=plan.gpus * hw.dollars_per_gpu_hour,
            dollars_total=res.dollars,
        )
    except Exception as exc:
        return SkippedPlan(plan.tensor, plan.data, plan.pipeline, f"simulation failed: {exc}")


def sweep(
    model: ModelConfig,
    hw: HardwareSpec,
    bounds: tuple[int, int, int],
    tokens: float,
    db: CostDatabase,
    global_batch: int,
    micro_batch: int = 1,
    schedule: Schedule = Schedule.ONE_F_ONE_B,
    grad_buckets: int = 1,
    iterations_override: int | None = None,
    multiplier: int = 6,
    memory_limit_bytes: float | None = None,
    parallel: int | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> tuple[list[SweepPoint], list[SkippedPlan]]:
    """Simulate every valid plan within the bounds; results sorted by total
    dollars ascending.  Per-plan failures are recorded, never fatal."""
    plans, skipped = enumerate_plans(model, bounds, global_batch, micro_batch, schedule, grad_buckets)
    if memory_limit_bytes is not None:
        kept = []
        for plan in plans:
            need = memory_per_gpu(model, plan)
            if need > memory_limit_bytes:
                skipped.append(SkippedPlan(
                    plan.tensor, plan.data, plan.pipeline,
                    f"memory estimate {need / 1e9:.1f} GB exceeds {memory_limit_bytes / 1e9:.1f} GB",
                ))
            else:
                kept.append(plan)
        plans = kept

    if parallel is None:
        parallel = os.cpu_count() or 1
    points: list[SweepPoint] = []
    done = 0
    total = len(plans)
    init_args = (model, hw, db, tokens, iterations_override, multiplier)
    if parallel > 1 and total > 8:
        with ProcessPoolExecutor(max_workers=parallel, initializer=_sweep_init, initargs=init_args) as pool:
            for out in pool.map(_sweep_eval, plans, chunksize=max(1, total // (parallel * 8))):
                done += 1
                if progress:
                    progress(done, total)
                (points if isinstance(out, SweepPoint) else skipped).append(out)
    else:
        _sweep_init(*init_args)
        for plan in plans:
            out = _sweep_eval(plan)
            done += 1
            if progress:
                progress(done, total)
            (points if isinstance(out, SweepPoint) else skipped).append(out)

    points.sort(key=_point_order)
    return points, skipped


def _point_order(pt: SweepPoint):
    return (pt.dollars_total, pt.days, pt.gpus, pt.plan.tensor, pt.plan.data, pt.plan.pipeline)


def pareto_frontier(points: Sequence[SweepPoint]) -> list[SweepPoint]:
    """Non-dominated points in (days, dollars_total), sorted by days."""
    ordered = sorted(points, key=lambda p: (p.days, p.dollars_total))
    out: list[SweepPoint] = []
    best_cost = math.inf
    for pt in ordered:
        if pt.dollars_total < best_cost:
            out.append(pt)
            best_cost = pt.dollars_total
    return out


def pareto_and_pick(
    points: Sequence[SweepPoint],
    gpu_budgets: Iterable[int],
    window: float = 0.85,
) -> tuple[dict[int, SweepPoint], list[SweepPoint]]:
    """For each reference GPU budget, the cheapest point using a comparable
    number of GPUs (window*budget <= G <= budget), plus the overall
    time/cost Pareto frontier."""
    if not points:
        raise SimulationError("pareto_and_pick needs at least one sweep point")
    picks: dict[int, SweepPoint] = {}
    for budget in gpu_budgets:
        candidates = [p for p in points if window * budget <= p.gpus <= budget]
        if not candidates:
            raise SimulationError(f"no sweep point within [{window:.2f}*{budget}, {budget}] GPUs")
        picks[budget] = min(candidates, key=_point_order)
    return picks, pareto_frontier(points)


def chinchilla_naive(compute_budget: float) -> tuple[float, float]:
    """Compute-optimal (parameters, tokens) from the square-root scaling law."""
    if compute_budget <= 0:
        raise SimulationError("compute budget must be positive")
    root = math.sqrt(compute_budget)
    return CHINCHILLA_PARAM_COEF * root, CHINCHILLA_TOKEN_COEF * root


def grid_model(hidden_size: int, num_layers: int, seq_len: int = 2048, vocab_size: int = 51_200) -> ModelConfig:
    heads = max(1, hidden_size // HEAD_DIM)
    return ModelConfig(
        name=f"h{hidden_size}-L{num_layers}",
        hidden_size=hidden_size,
        num_layers=num_layers,
        num_heads=heads,
        seq_len=seq_len,
        vocab_size=vocab_size,
    )


def chinchilla_effective(
    hw: HardwareSpec,
    gpus: int,
    days_budget: float,
    grid: Sequence[tuple[int, int]],
    db: CostDatabase | None,
    global_batch: int,
    micro_batch: int = 1,
    schedule: Schedule = Schedule.ONE_F_ONE_B,
    seq_len: int = 2048,
    tokens_per_param: float = TOKENS_PER_PARAM,
    t_max: int = 8,
    evaluate: Callable[[ModelConfig, ParallelPlan], float] | None = None,
) -> ChinchillaResult:
    """Size the largest trainable model: per (h, L) grid point, find the
    fastest valid plan on at most ``gpus`` GPUs, derive the days to consume
    tokens_per_param * N tokens, and select the largest model that fits the
    day budget.  ``evaluate`` overrides the simulator (used to inject
    reference timings)."""
    if not grid:
        raise SimulationError("chinchilla grid must not be empty")
    if evaluate is None:
        if db is None:
            raise SimulationError("chinchilla_effective needs a cost database or an evaluate callable")
        evaluate = lambda model, plan: iter_time_for_plan(model, plan, db)

    points: list[ChinchillaPoint] = []
    for hidden_size, num_layers in grid:
        model = grid_model(hidden_size, num_layers, seq_len=seq_len)
        n_params = float(param_count(model))
        tokens = tokens_per_param * n_params
        best_plan: ParallelPlan | None = None
        best_time = math.inf
        for t in tensor_degrees(model, min(t_max, gpus)):
            for p in range(1, min(model.num_layers, gpus // t) + 1):
                d_cap = gpus // (t * p)
                for d in range(1, d_cap + 1):
                    if global_batch % d != 0:
                        continue
                    plan = ParallelPlan(
                        tensor=t, data=d, pipeline=p,
                        global_batch=global_batch, micro_batch=int(micro_batch), schedule=schedule,
                    )
                    if plan.violations(model):
                        continue
                    iter_time = evaluate(model, plan)
                    if iter_time < best_time:
                        best_time = iter_time
                        best_plan = plan
        if best_plan is None:
            points.append(ChinchillaPoint(hidden_size, num_layers, n_params, tokens, None, math.inf, math.inf, False))
            continue
        iters = math.ceil(tokens / (global_batch * seq_len))
        est_days = best_time * iters / 86_400.0
        points.append(
            ChinchillaPoint(
                hidden_size, num_layers, n_params, tokens,
                best_plan, best_time, est_days, est_days <= days_budget,
            )
        )
    points.sort(key=lambda pt: -pt.params)
    best = next((pt for pt in points if pt.feasible), None)
    diag = "" if best else f"no grid point trains within {days_budget} days on {gpus} GPUs"
    return ChinchillaResult(points=points, best=best, diagnostics=diag)
