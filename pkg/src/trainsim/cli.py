"""Command-line entry points tying the pipeline together: build the graph,
lower it, simulate, and emit reports (tables, JSON, figures).

Exit codes: 0 success, 1 usage error, 2 input validation error, 3 runtime
failure.  All referenced files are loaded and validated before any
simulation starts, and reports are only written on success.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import cluster as cluster_mod
from . import explorer, reports
from .core import HardwareSpec, ModelConfig, ParallelPlan, Schedule, TrainingRun
from .costdb import CostDatabase, database_from_files, load_profile
from .engine import end_to_end, export_timeline_csv, simulate_iteration
from .errors import ConfigError, PlanError, ProfileError, TrainsimError
from .opgraph import build_operator_graph, build_stage_task_graph, lower_to_tasks
from .profiles import default_profile_path

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc


def _resolve(base_dir: str, value):
    """Inline object, or a path (relative to the config file) to one."""
    if isinstance(value, str):
        return _load_json(os.path.join(base_dir, value))
    if isinstance(value, dict):
        return value
    raise ConfigError(f"expected object or path string, got {type(value).__name__}")


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return doc[key]


def parse_model(doc: dict, where: str) -> ModelConfig:
    try:
        return ModelConfig(
            name=str(doc.get("name", "model")),
            hidden_size=int(_require(doc, "hidden_size", where)),
            num_layers=int(_require(doc, "num_layers", where)),
            num_heads=int(_require(doc, "num_heads", where)),
            seq_len=int(_require(doc, "seq_len", where)),
            vocab_size=int(doc.get("vocab_size", 51_200)),
        )
    except (TypeError, ValueError, PlanError) as exc:
        raise ConfigError(f"{where}: bad model: {exc}") from exc


def parse_hardware(doc: dict, where: str) -> HardwareSpec:
    try:
        return HardwareSpec(
            gpus_per_node=int(doc.get("gpus_per_node", 8)),
            peak_flops=float(doc.get("peak_flops", 312e12)),
            gpu_mem_bytes=float(doc.get("gpu_mem_bytes", 80e9)),
            inter_node_bmax=float(doc.get("inter_node_bmax", 800e9)),
            alpha=float(doc.get("alpha", 1.0)),
            dollars_per_gpu_hour=float(doc.get("dollars_per_gpu_hour", 5.0)),
        )
    except (TypeError, ValueError, PlanError) as exc:
        raise ConfigError(f"{where}: bad hardware: {exc}") from exc


def parse_plan(doc: dict, where: str) -> ParallelPlan:
    try:
        return ParallelPlan(
            tensor=int(_require(doc, "tensor", where)),
            data=int(_require(doc, "data", where)),
            pipeline=int(_require(doc, "pipeline", where)),
            global_batch=int(_require(doc, "global_batch", where)),
            micro_batch=int(doc.get("micro_batch", 1)),
            schedule=Schedule(doc.get("schedule", "1f1b")),
            grad_buckets=int(doc.get("grad_buckets", 1)),
        )
    except (TypeError, ValueError, PlanError) as exc:
        raise ConfigError(f"{where}: bad plan: {exc}") from exc


def build_database(doc: dict, base_dir: str, hw: HardwareSpec, where: str) -> CostDatabase:
    """Profile selection: explicit path(s), "builtin" (bundled synthetic
    table), or "none" for the pure analytical fallback."""
    spec = doc.get("profile", "builtin")
    paths: list[str] = []
    if spec == "builtin":
        paths = [default_profile_path()]
    elif spec in ("none", None):
        paths = []
    elif isinstance(spec, str):
        paths = [os.path.join(base_dir, spec)]
    elif isinstance(spec, list):
        paths = [os.path.join(base_dir, p) for p in spec]
    else:
        raise ConfigError(f"{where}: profile must be a path, list of paths, 'builtin', or 'none'")
    return database_from_files(
        hw,
        paths,
        fallback_enabled=bool(doc.get("fallback", True)),
        efficiency=float(doc.get("efficiency", 0.5)),
        weight_update_seconds=float(doc.get("weight_update_us", 0.0)) * 1e-6,
        flops_mode=str(doc.get("flops_mode", "shape")),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg_path = args.config
    doc = _load_json(cfg_path)
    base = os.path.dirname(os.path.abspath(cfg_path))
    model = parse_model(_resolve(base, _require(doc, "model", cfg_path)), cfg_path)
    hw = parse_hardware(_resolve(base, doc.get("hardware", {})), cfg_path)
    plan = parse_plan(_resolve(base, _require(doc, "plan", cfg_path)), cfg_path)
    plan.validate(model)
    db = build_database(doc, base, hw, cfg_path)
    total_tokens = float(doc.get("total_tokens", 0)) or None
    iterations = doc.get("iterations")
    if total_tokens is None and iterations is None:
        raise ConfigError(f"{cfg_path}: need total_tokens or iterations")
    run = TrainingRun(
        model=model, plan=plan, hw=hw,
        total_tokens=total_tokens or 1.0,
        iterations_override=int(iterations) if iterations is not None else None,
    )

    topology = doc.get("topology", "auto")
    want_timeline = bool(args.timeline)
    if topology == "auto":
        topology = "full" if plan.gpus <= 64 else "replica"
    if topology == "stage":
        tg = build_stage_task_graph(model, plan, db, keep_labels=want_timeline)
    elif topology in ("replica", "full"):
        g = build_operator_graph(model, plan, representative=(topology == "replica"))
        tg = lower_to_tasks(g=g, db=db, keep_labels=want_timeline)
    else:
        raise ConfigError(f"{cfg_path}: unknown topology {topology!r}")

    sim = simulate_iteration(tg, want_timeline=want_timeline)
    result = end_to_end(run, sim.iter_time, multiplier=int(doc.get("flops_multiplier", 6)), base=sim)

    outdir = args.output_dir
    doc_out = reports.simulate_report_doc(doc, result, run.iterations)
    written = [reports.write_json(doc_out, os.path.join(outdir, "simulate.json"))]
    if want_timeline and sim.timeline is not None:
        tl_path = os.path.join(outdir, "timeline.csv")
        export_timeline_csv(sim.timeline, tl_path)
        written.append(tl_path)
        if args.figures:
            written.append(reports.render_gantt(sim.timeline, os.path.join(outdir, "timeline.png")))

    print(f"model {model.name}: plan (t={plan.tensor}, d={plan.data}, p={plan.pipeline}), {plan.gpus} GPUs")
    print(f"  iteration time  : {result.iter_time:.4f} s")
    print(f"  iterations      : {run.iterations}")
    print(f"  training time   : {result.end_to_end_days:.2f} days")
    print(f"  GPU utilization : {100 * result.utilization:.2f} %")
    print(f"  total cost      : ${result.dollars / 1e6:.2f}M")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg_path = args.config
    doc = _load_json(cfg_path)
    base = os.path.dirname(os.path.abspath(cfg_path))
    model = parse_model(_resolve(base, _require(doc, "model", cfg_path)), cfg_path)
    hw = parse_hardware(_resolve(base, doc.get("hardware", {})), cfg_path)
    db = build_database(doc, base, hw, cfg_path)
    bounds_doc = _require(doc, "bounds", cfg_path)
    try:
        bounds = (int(bounds_doc["t_max"]), int(bounds_doc["d_max"]), int(bounds_doc["p_max"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg_path}: bounds needs integer t_max/d_max/p_max: {exc}") from exc
    tokens = float(doc.get("total_tokens", 0)) or 1.0
    iterations = doc.get("iterations")

    last = {"n": -1}

    def progress(done, total):
        if args.progress and (done % 250 == 0 or done == total) and done != last["n"]:
            last["n"] = done
            print(f"  simulated {done}/{total} plans", file=sys.stderr)

    points, skipped = explorer.sweep(
        model, hw, bounds, tokens, db,
        global_batch=int(_require(doc, "global_batch", cfg_path)),
        micro_batch=int(doc.get("micro_batch", 1)),
        schedule=Schedule(doc.get("schedule", "1f1b")),
        grad_buckets=int(doc.get("grad_buckets", 1)),
        iterations_override=int(iterations) if iterations is not None else None,
        multiplier=int(doc.get("flops_multiplier", 6)),
        memory_limit_bytes=hw.gpu_mem_bytes if doc.get("memory_filter", False) else None,
        parallel=args.parallel,
        progress=progress,
    )

    outdir = args.output_dir
    written = [reports.write_sweep_csv(points, skipped, os.path.join(outdir, "sweep.csv"))]
    if args.figures:
        written += reports.render_sweep_figures(points, os.path.join(outdir, "sweep"))
    budgets = doc.get("gpu_budgets")
    if budgets and points:
        picks, frontier = explorer.pareto_and_pick(points, [int(b) for b in budgets],
                                                   window=float(doc.get("budget_window", 0.85)))
        picks_doc = {
            str(budget): {
                "plan": {"t": pt.plan.tensor, "d": pt.plan.data, "p": pt.plan.pipeline},
                "gpus": pt.gpus,
                "iter_time_s": pt.iter_time,
                "days": pt.days,
                "utilization": pt.utilization,
                "dollars_total": pt.dollars_total,
            }
            for budget, pt in picks.items()
        }
        written.append(reports.write_json(
            {"picks": picks_doc, "frontier_points": len(frontier)},
            os.path.join(outdir, "sweep_picks.json"),
        ))

    print(f"{len(points)} valid plans, {len(skipped)} skipped")
    if points:
        best = points[0]
        print(f"cheapest: (t={best.plan.tensor}, d={best.plan.data}, p={best.plan.pipeline}) "
              f"{best.gpus} GPUs, {best.days:.2f} days, ${best.dollars_total / 1e6:.2f}M")
        fastest = min(points, key=lambda p: p.iter_time)
        print(f"fastest : (t={fastest.plan.tensor}, d={fastest.plan.data}, p={fastest.plan.pipeline}) "
              f"{fastest.gpus} GPUs, iter {fastest.iter_time:.2f} s")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_chinchilla(args) -> int:
    cfg_path = args.config
    doc = _load_json(cfg_path)
    base = os.path.dirname(os.path.abspath(cfg_path))
    outdir = args.output_dir
    written = []
    did_anything = False

    if "naive" in doc:
        did_anything = True
        budget = float(_require(doc["naive"], "compute_budget", f"{cfg_path}: naive"))
        n_params, tokens = explorer.chinchilla_naive(budget)
        print(f"naive Chinchilla point for C = {budget:.4g} FLOPs:")
        print(f"  parameters : {n_params / 1e9:.2f} B")
        print(f"  tokens     : {tokens / 1e9:.0f} B")
        written.append(reports.write_json(
            {"compute_budget": budget, "params": n_params, "tokens": tokens},
            os.path.join(outdir, "chinchilla_naive.json"),
        ))

    if "effective" in doc:
        did_anything = True
        eff = doc["effective"]
        where = f"{cfg_path}: effective"
        hw = parse_hardware(_resolve(base, doc.get("hardware", {})), cfg_path)
        db = build_database(doc, base, hw, cfg_path)
        grid_raw = _require(eff, "grid", where)
        try:
            grid = [(int(h), int(l)) for h, l in grid_raw]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: grid must be [[h, L], ...]: {exc}") from exc
        days_budget = float(_require(eff, "days_budget", where))
        result = explorer.chinchilla_effective(
            hw,
            gpus=int(_require(eff, "gpus", where)),
            days_budget=days_budget,
            grid=grid,
            db=db,
            global_batch=int(_require(eff, "global_batch", where)),
            micro_batch=int(eff.get("micro_batch", 1)),
            seq_len=int(eff.get("seq_len", 2048)),
            t_max=int(eff.get("t_max", 8)),
        )
        print(f"{'h':>7} {'L':>4} {'params(B)':>10} {'tokens(B)':>10} {'plan':>14} {'days':>7} feasible")
        for pt in result.points:
            plan = f"({pt.best_plan.tensor},{pt.best_plan.data},{pt.best_plan.pipeline})" if pt.best_plan else "-"
            mark = " <== selected" if pt is result.best else ""
            print(f"{pt.hidden_size:>7} {pt.num_layers:>4} {pt.params / 1e9:>10.2f} "
                  f"{pt.tokens / 1e9:>10.0f} {plan:>14} {pt.est_days:>7.1f} "
                  f"{'yes' if pt.feasible else 'no'}{mark}")
        if result.best is None:
            print(f"no feasible point: {result.diagnostics}")
        written.append(reports.write_chinchilla_csv(result, os.path.join(outdir, "chinchilla.csv")))
        if args.figures:
            written.append(reports.render_chinchilla_figure(
                result, days_budget, os.path.join(outdir, "chinchilla.png")))

    if not did_anything:
        raise ConfigError(f"{cfg_path}: need a 'naive' or 'effective' section")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg_path = args.config
    doc = _load_json(cfg_path)
    base = os.path.dirname(os.path.abspath(cfg_path))
    hw = parse_hardware(_resolve(base, doc.get("hardware", {})), cfg_path)
    db = build_database(doc, base, hw, cfg_path)
    catalog_spec = doc.get("catalog", "builtin")
    if catalog_spec == "builtin":
        catalog = cluster_mod.builtin_catalog()
    else:
        catalog = cluster_mod.load_catalog(os.path.join(base, catalog_spec))
    total_gpus = int(doc.get("total_gpus", cluster_mod.DEFAULT_TOTAL_GPUS))
    deadline_mode = bool(doc.get("deadline_mode", True))

    trace_spec = _require(doc, "trace", cfg_path)
    if isinstance(trace_spec, str):
        jobs = cluster_mod.load_trace(os.path.join(base, trace_spec))
    else:
        syn = trace_spec.get("synthetic")
        if not isinstance(syn, dict):
            raise ConfigError(f"{cfg_path}: trace must be a CSV path or {{'synthetic': {{...}}}}")
        jobs = cluster_mod.synthesize_trace(
            model_ids=[e.id for e in catalog],
            n_jobs=int(syn.get("jobs", 32)),
            seed=int(syn.get("seed", 0)),
            window_hours=float(syn.get("window_hours", 150.0)),
            iterations_range=tuple(syn.get("iterations_range", (200, 2000))),
            all_at_once=bool(syn.get("all_at_once", False)),
        )
    known = {e.id for e in catalog}
    for job in jobs:
        if job.model_id not in known:
            raise ConfigError(f"{cfg_path}: job {job.id} references unknown model {job.model_id!r}")

    t_max = int(doc.get("t_max", 16))
    curves = {
        cluster_mod.Mode.BASELINE: cluster_mod.build_curves(
            catalog, hw, db, cluster_mod.Mode.BASELINE, total_gpus, t_max=t_max, parallel=args.parallel),
        cluster_mod.Mode.OPTIMAL: cluster_mod.build_curves(
            catalog, hw, db, cluster_mod.Mode.OPTIMAL, total_gpus, t_max=t_max, parallel=args.parallel),
    }
    reference = curves[cluster_mod.Mode.OPTIMAL]
    wanted = doc.get("modes", ["baseline", "optimal"])
    results = {}
    for name in wanted:
        mode = cluster_mod.Mode(name)
        results[mode] = cluster_mod.run_schedule(
            jobs, curves[mode], total_gpus=total_gpus,
            deadline_mode=deadline_mode, deadline_reference=reference,
        )

    outdir = args.output_dir
    written = [reports.write_json(reports.cluster_report_doc(results), os.path.join(outdir, "cluster.json"))]
    trace_out = os.path.join(outdir, "trace.csv")
    cluster_mod.save_trace(trace_out, jobs)
    written.append(trace_out)
    if args.figures and len(results) > 1:
        written.append(reports.render_cluster_figure(results, os.path.join(outdir, "cluster_metrics.png")))

    for mode, result in results.items():
        ratio, avg_jct, makespan = cluster_mod.metrics(result)
        print(f"{mode.value:>9}: deadline ratio {ratio:.3f}, avg JCT {avg_jct / 3600:.2f} h, "
              f"makespan {makespan / 3600:.2f} h")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_validate_profile(args) -> int:
    status = EXIT_OK
    for path in args.paths:
        try:
            ops, table = load_profile(path)
            n_rows = len(table.rows()) if table else 0
            print(f"{path}: OK ({len(ops)} operator entries, {n_rows} collective rows)")
        except ProfileError as exc:
            print(f"{path}: INVALID: {exc}", file=sys.stderr)
            status = EXIT_VALIDATION
    return status


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trainsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--output-dir", default="reports", help="directory for emitted reports")
        p.add_argument("--figures", dest="figures", action="store_true", default=True)
        p.add_argument("--no-figures", dest="figures", action="store_false",
                       help="skip matplotlib figure rendering")
        p.add_argument("--parallel", type=int, default=None,
                       help="worker processes for batch simulation (default: all cores)")

    p = sub.add_parser("simulate", help="simulate one (model, plan) configuration")
    p.add_argument("config")
    p.add_argument("--timeline", action="store_true", help="export the per-task timeline")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="explore the (t, d, p) design space")
    p.add_argument("config")
    p.add_argument("--progress", action="store_true", help="report sweep progress on stderr")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("chinchilla", help="compute-optimal model sizing")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_chinchilla)

    p = sub.add_parser("cluster", help="multi-tenant cluster scheduling comparison")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("validate-profile", help="check profile files against the schema")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_validate_profile)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ProfileError, PlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
