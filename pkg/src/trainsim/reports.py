"""Report emission: delimited tables, JSON documents, and the matplotlib
figures rendered next to them.

Figures are drawn with the Agg backend straight to files; JSON output is
canonicalized (sorted keys, no timestamps) so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .cluster import Mode, ScheduleResult, metrics
from .engine import SimResult
from .explorer import ChinchillaResult, SkippedPlan, SweepPoint, pareto_frontier


def _ensure_dir(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_json(doc: dict, path: str) -> str:
    _ensure_dir(path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = [
    "t", "d", "p", "micro_batch", "schedule", "gpus", "iter_time_s", "days",
    "utilization", "dollars_per_hour", "dollars_total", "valid", "skip_reason",
]


def write_sweep_csv(points: list[SweepPoint], skipped: list[SkippedPlan], path: str) -> str:
    _ensure_dir(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for pt in points:
            plan = pt.plan
            w.writerow([
                plan.tensor, plan.data, plan.pipeline, plan.micro_batch,
                plan.schedule.value, pt.gpus, f"{pt.iter_time:.6f}", f"{pt.days:.4f}",
                f"{pt.utilization:.6f}", f"{pt.dollars_per_hour:.2f}",
                f"{pt.dollars_total:.2f}", "yes", "",
            ])
        for sk in sorted(skipped, key=lambda s: (s.tensor, s.data, s.pipeline)):
            w.writerow([sk.tensor, sk.data, sk.pipeline, "", "", "", "", "", "", "", "", "no", sk.reason])
    return path


def render_sweep_figures(points: list[SweepPoint], prefix: str) -> list[str]:
    """Two views of the design space: iteration time vs utilization, and the
    training time vs dollars trade-off with its Pareto frontier."""
    if not points:
        return []
    out = []
    _ensure_dir(prefix + "_x.png")

    fig, ax = plt.subplots(figsize=(7, 5))
    sc = ax.scatter(
        [p.iter_time for p in points],
        [100 * p.utilization for p in points],
        c=[p.gpus for p in points],
        s=12, cmap="viridis",
    )
    fig.colorbar(sc, ax=ax, label="GPUs")
    ax.set_xlabel("iteration time (s)")
    ax.set_ylabel("GPU compute utilization (%)")
    ax.set_title("design points: iteration time vs utilization")
    path = prefix + "_time_vs_util.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    out.append(path)

    fig, ax = plt.subplots(figsize=(7, 5))
    ax.scatter(
        [p.days for p in points],
        [p.dollars_total / 1e6 for p in points],
        s=12, color="lightsteelblue", label="valid plans",
    )
    frontier = pareto_frontier(points)
    ax.plot(
        [p.days for p in frontier],
        [p.dollars_total / 1e6 for p in frontier],
        "ro-", ms=5, lw=1.2, label="Pareto frontier",
    )
    ax.set_xlabel("end-to-end training time (days)")
    ax.set_ylabel("total cost (million $)")
    ax.set_title("cost vs training time")
    ax.legend()
    path = prefix + "_cost_frontier.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    out.append(path)
    return out


# ---------------------------------------------------------------------------
# Chinchilla
# ---------------------------------------------------------------------------


def write_chinchilla_csv(result: ChinchillaResult, path: str) -> str:
    _ensure_dir(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["h", "L", "params_b", "tokens_b", "t", "d", "p", "iter_time_s", "est_days", "feasible", "selected"])
        for pt in result.points:
            plan = pt.best_plan
            w.writerow([
                pt.hidden_size, pt.num_layers,
                f"{pt.params / 1e9:.2f}", f"{pt.tokens / 1e9:.0f}",
                plan.tensor if plan else "", plan.data if plan else "", plan.pipeline if plan else "",
                f"{pt.iter_time:.4f}" if plan else "",
                f"{pt.est_days:.1f}" if plan else "",
                "yes" if pt.feasible else "no",
                "yes" if pt is result.best else "no",
            ])
    return path


def render_chinchilla_figure(result: ChinchillaResult, days_budget: float, path: str) -> str:
    _ensure_dir(path)
    pts = [p for p in result.points if p.best_plan is not None]
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.scatter([p.params / 1e9 for p in pts], [p.est_days for p in pts], s=30, label="grid points")
    if result.best:
        ax.scatter([result.best.params / 1e9], [result.best.est_days], s=120, marker="*",
                   color="red", zorder=3, label="selected model")
    ax.axhline(days_budget, color="gray", ls="--", lw=1, label=f"{days_budget:g}-day budget")
    ax.set_xlabel("model parameters (billion)")
    ax.set_ylabel("estimated training days")
    ax.set_title("compute-optimal model sizing under effective throughput")
    ax.legend()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Cluster
# ---------------------------------------------------------------------------


def cluster_report_doc(results: dict[Mode, ScheduleResult]) -> dict:
    doc: dict = {"modes": {}}
    for mode, result in results.items():
        ratio, avg_jct, makespan = metrics(result)
        doc["modes"][mode.value] = {
            "deadline_ratio": ratio,
            "avg_jct_s": avg_jct,
            "makespan_s": makespan,
            "total_gpus": result.total_gpus,
            "jobs": [
                {
                    "id": j.id,
                    "model": j.model_id,
                    "state": j.state.value,
                    "arrival_s": j.arrival,
                    "deadline_s": j.deadline,
                    "completion_s": j.completion if j.completion != float("inf") else None,
                    "jct_s": j.jct if j.completion != float("inf") else None,
                    "deadline_met": j.state.value == "completed" and j.completion <= j.deadline * (1 + 1e-9),
                }
                for j in result.jobs
            ],
        }
    return doc


def render_cluster_figure(results: dict[Mode, ScheduleResult], path: str) -> str:
    _ensure_dir(path)
    labels = ["deadline ratio", "avg JCT", "makespan"]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    vals = {mode: metrics(res) for mode, res in results.items()}
    modes = list(results)
    colors = {Mode.BASELINE: "gray", Mode.OPTIMAL: "tab:red"}
    for i, ax in enumerate(axes):
        xs = range(len(modes))
        ax.bar(xs, [vals[m][i] for m in modes], color=[colors.get(m, "tab:blue") for m in modes], width=0.6)
        ax.set_xticks(list(xs))
        ax.set_xticklabels([m.value for m in modes])
        ax.set_title(labels[i])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Single simulation
# ---------------------------------------------------------------------------


def simulate_report_doc(config: dict, result: SimResult, iterations: int) -> dict:
    return {
        "config": config,
        "iter_time_s": result.iter_time,
        "iterations": iterations,
        "end_to_end_days": result.end_to_end_days,
        "utilization": result.utilization,
        "dollars_total": result.dollars,
        "per_device_busy": {
            str(dev): {"compute_s": c, "comm_s": m} for dev, (c, m) in sorted(result.per_device_busy.items())
        },
    }


def render_gantt(timeline, path: str, max_tasks: int = 20000) -> str:
    """Timeline strip chart: one lane per (device, stream)."""
    _ensure_dir(path)
    entries = timeline[:max_tasks]
    lanes = sorted({(dev, stream) for dev, stream, *_ in entries})
    lane_of = {key: i for i, key in enumerate(lanes)}
    fig, ax = plt.subplots(figsize=(10, 0.5 + 0.35 * len(lanes)))
    colors = {0: "tab:blue", 1: "tab:orange"}
    for dev, stream, _label, start, end in entries:
        y = lane_of[(dev, stream)]
        ax.barh(y, (end - start) * 1e6, left=start * 1e6, height=0.7,
                color=colors[stream], edgecolor="none")
    ax.set_yticks(range(len(lanes)))
    ax.set_yticklabels([f"gpu{dev}/{'compute' if s == 0 else 'comm'}" for dev, s in lanes])
    ax.set_xlabel("time (us)")
    ax.set_title("per-device execution timeline")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
