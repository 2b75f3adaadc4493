import json
import os
import subprocess
import sys

import pytest

from trainsim.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main

TINY_MODEL = {
    "name": "toy",
    "hidden_size": 64,
    "num_layers": 4,
    "num_heads": 4,
    "seq_len": 32,
    "vocab_size": 100,
}


def write_config(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def run_cli(*argv):
    return main(list(argv))


class TestSimulate:
    def config(self, tmp_path, **extra):
        doc = {
            "model": TINY_MODEL,
            "plan": {"tensor": 1, "data": 1, "pipeline": 1, "global_batch": 4, "micro_batch": 1},
            "profile": "none",
            "efficiency": 1.0,
            "total_tokens": 1e6,
            **extra,
        }
        return write_config(tmp_path, "sim.json", doc)

    def test_compute_only_sum(self, tmp_path, capsys):
        # (1,1,1) with pure fallback: no communication, so the iteration
        # time is exactly the sum of all kernel durations
        cfg = self.config(tmp_path)
        out = tmp_path / "r"
        assert run_cli("simulate", cfg, "--output-dir", str(out), "--no-figures") == EXIT_OK
        report = json.loads((out / "simulate.json").read_text())

        from trainsim.core import ModelConfig, ParallelPlan
        from trainsim.costdb import CostDatabase
        from trainsim.core import HardwareSpec
        from trainsim.opgraph import build_stage_task_graph

        model = ModelConfig(**{k: v for k, v in TINY_MODEL.items()})
        plan = ParallelPlan(1, 1, 1, global_batch=4, micro_batch=1)
        db = CostDatabase(hw=HardwareSpec(), efficiency=1.0)
        tg = build_stage_task_graph(model, plan, db)
        assert report["iter_time_s"] == pytest.approx(sum(tg.duration), rel=1e-12)

    def test_rerun_byte_identical(self, tmp_path):
        cfg = self.config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("simulate", cfg, "--output-dir", str(out1), "--no-figures") == EXIT_OK
        assert run_cli("simulate", cfg, "--output-dir", str(out2), "--no-figures") == EXIT_OK
        assert (out1 / "simulate.json").read_bytes() == (out2 / "simulate.json").read_bytes()

    def test_timeline_and_figures(self, tmp_path):
        cfg = self.config(tmp_path, topology="replica")
        out = tmp_path / "r"
        assert run_cli("simulate", cfg, "--output-dir", str(out), "--timeline") == EXIT_OK
        assert (out / "timeline.csv").exists()
        assert (out / "timeline.png").stat().st_size > 0

    def test_missing_required_keys(self, tmp_path):
        cfg = write_config(tmp_path, "bad.json", {"model": TINY_MODEL})
        assert run_cli("simulate", cfg) == EXIT_VALIDATION

    def test_invalid_plan_is_validation_error(self, tmp_path):
        cfg = self.config(tmp_path, plan={"tensor": 3, "data": 1, "pipeline": 1,
                                          "global_batch": 4, "micro_batch": 1})
        assert run_cli("simulate", cfg) == EXIT_VALIDATION

    def test_missing_file(self):
        assert run_cli("simulate", "/nonexistent/config.json") == EXIT_VALIDATION

    def test_usage_error(self):
        assert run_cli("simulate") == EXIT_USAGE

    def test_model_from_separate_file(self, tmp_path):
        model_path = write_config(tmp_path, "model.json", TINY_MODEL)
        cfg = self.config(tmp_path, model=os.path.basename(model_path))
        out = tmp_path / "r"
        assert run_cli("simulate", cfg, "--output-dir", str(out), "--no-figures") == EXIT_OK


class TestSweep:
    def config(self, tmp_path, bounds=(2, 2, 2), **extra):
        t, d, p = bounds
        doc = {
            "model": TINY_MODEL,
            "bounds": {"t_max": t, "d_max": d, "p_max": p},
            "global_batch": 4,
            "profile": "none",
            "total_tokens": 1e6,
            **extra,
        }
        return write_config(tmp_path, "sweep.json", doc)

    def test_bounds_222_gives_8_rows(self, tmp_path):
        cfg = self.config(tmp_path)
        out = tmp_path / "r"
        assert run_cli("sweep", cfg, "--output-dir", str(out), "--no-figures", "--parallel", "1") == EXIT_OK
        lines = (out / "sweep.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 8  # header + every candidate triple

    def test_bounds_111_single_row(self, tmp_path):
        cfg = self.config(tmp_path, bounds=(1, 1, 1))
        out = tmp_path / "r"
        assert run_cli("sweep", cfg, "--output-dir", str(out), "--no-figures", "--parallel", "1") == EXIT_OK
        lines = (out / "sweep.csv").read_text().strip().splitlines()
        assert len(lines) == 2

    def test_rerun_identical_csv(self, tmp_path):
        cfg = self.config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_cli("sweep", cfg, "--output-dir", str(out1), "--no-figures", "--parallel", "1")
        run_cli("sweep", cfg, "--output-dir", str(out2), "--no-figures", "--parallel", "2")
        assert (out1 / "sweep.csv").read_bytes() == (out2 / "sweep.csv").read_bytes()

    def test_figures_rendered_alongside_csv(self, tmp_path):
        cfg = self.config(tmp_path)
        out = tmp_path / "r"
        assert run_cli("sweep", cfg, "--output-dir", str(out), "--parallel", "1") == EXIT_OK
        assert (out / "sweep.csv").exists()
        assert (out / "sweep_time_vs_util.png").stat().st_size > 0
        assert (out / "sweep_cost_frontier.png").stat().st_size > 0

    def test_budget_picks(self, tmp_path):
        cfg = self.config(tmp_path, gpu_budgets=[4, 8])
        out = tmp_path / "r"
        assert run_cli("sweep", cfg, "--output-dir", str(out), "--no-figures", "--parallel", "1") == EXIT_OK
        picks = json.loads((out / "sweep_picks.json").read_text())
        assert set(picks["picks"]) == {"4", "8"}


class TestChinchilla:
    def test_naive_output(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "c.json", {"naive": {"compute_budget": 2.7165e24}})
        out = tmp_path / "r"
        assert run_cli("chinchilla", cfg, "--output-dir", str(out), "--no-figures") == EXIT_OK
        printed = capsys.readouterr().out
        assert "146.69" in printed
        assert "3090" in printed
        doc = json.loads((out / "chinchilla_naive.json").read_text())
        assert doc["params"] == pytest.approx(146.69e9, rel=1e-3)

    def test_effective_toy_grid(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "profile": "none",
            "efficiency": 1.0,
            "effective": {
                "grid": [[128, 2], [256, 2]],
                "gpus": 4,
                "days_budget": 1e5,
                "global_batch": 8,
                "seq_len": 64,
                "t_max": 1,
            },
        })
        out = tmp_path / "r"
        assert run_cli("chinchilla", cfg, "--output-dir", str(out)) == EXIT_OK
        rows = (out / "chinchilla.csv").read_text().strip().splitlines()
        assert len(rows) == 3
        assert (out / "chinchilla.png").stat().st_size > 0

    def test_empty_grid_rejected(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {
            "effective": {"grid": [], "gpus": 4, "days_budget": 1, "global_batch": 8},
        })
        assert run_cli("chinchilla", cfg) == EXIT_RUNTIME

    def test_no_sections_rejected(self, tmp_path):
        cfg = write_config(tmp_path, "c.json", {})
        assert run_cli("chinchilla", cfg) == EXIT_VALIDATION


def tiny_catalog_doc():
    return {
        "models": [{
            "id": "toy",
            "hidden_size": 64,
            "num_layers": 4,
            "num_heads": 4,
            "seq_len": 32,
            "vocab_size": 100,
            "global_batch": 16,
            "baseline_tensor": 1,
            "baseline_pipeline": 1,
        }]
    }


class TestCluster:
    def config(self, tmp_path, trace, total_gpus=8):
        cat = write_config(tmp_path, "catalog.json", tiny_catalog_doc())
        return write_config(tmp_path, "cluster.json", {
            "catalog": os.path.basename(cat),
            "profile": "none",
            "efficiency": 1.0,
            "total_gpus": total_gpus,
            "t_max": 2,
            "trace": trace,
        })

    def test_three_job_toy_both_modes(self, tmp_path):
        trace_path = tmp_path / "trace.csv"
        trace_path.write_text(
            "job_id,arrival_s,model_id,iterations,lambda\n"
            "0,0.0,toy,50000,1.2\n"
            "1,0.5,toy,80000,0.8\n"
            "2,1.0,toy,60000,1.4\n"
        )
        cfg = self.config(tmp_path, "trace.csv")
        out = tmp_path / "r"
        assert run_cli("cluster", cfg, "--output-dir", str(out), "--parallel", "1") == EXIT_OK
        doc = json.loads((out / "cluster.json").read_text())
        base = doc["modes"]["baseline"]
        opt = doc["modes"]["optimal"]
        assert opt["deadline_ratio"] >= base["deadline_ratio"]
        assert opt["makespan_s"] <= base["makespan_s"] + 1e-9
        assert len(base["jobs"]) == 3
        assert (out / "cluster_metrics.png").stat().st_size > 0

    def test_empty_trace(self, tmp_path):
        cfg = self.config(tmp_path, {"synthetic": {"jobs": 0, "seed": 1}})
        out = tmp_path / "r"
        assert run_cli("cluster", cfg, "--output-dir", str(out), "--no-figures", "--parallel", "1") == EXIT_OK
        doc = json.loads((out / "cluster.json").read_text())
        assert doc["modes"]["optimal"]["makespan_s"] == 0.0
        assert doc["modes"]["optimal"]["jobs"] == []

    def test_seeded_rerun_identical(self, tmp_path):
        cfg = self.config(tmp_path, {"synthetic": {"jobs": 5, "seed": 42, "window_hours": 0.01,
                                                   "iterations_range": [20000, 90000]}})
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("cluster", cfg, "--output-dir", str(out1), "--no-figures", "--parallel", "1") == EXIT_OK
        assert run_cli("cluster", cfg, "--output-dir", str(out2), "--no-figures", "--parallel", "1") == EXIT_OK
        assert (out1 / "cluster.json").read_bytes() == (out2 / "cluster.json").read_bytes()
        assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()

    def test_unknown_model_in_trace(self, tmp_path):
        trace_path = tmp_path / "trace.csv"
        trace_path.write_text(
            "job_id,arrival_s,model_id,iterations,lambda\n0,0.0,missing,100,1.0\n"
        )
        cfg = self.config(tmp_path, "trace.csv")
        assert run_cli("cluster", cfg) == EXIT_VALIDATION


class TestValidateProfile:
    def test_good_profile(self, tmp_path, capsys):
        from trainsim.profiles import default_profile_path

        assert run_cli("validate-profile", default_profile_path()) == EXIT_OK
        assert "OK" in capsys.readouterr().out

    def test_bad_profile(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"ops": [{"sig": {"kind": "Nope"}}]}')
        assert run_cli("validate-profile", str(bad)) == EXIT_VALIDATION

    def test_mixed_paths(self, tmp_path):
        from trainsim.profiles import default_profile_path

        bad = tmp_path / "bad.json"
        bad.write_text("not json")
        assert run_cli("validate-profile", default_profile_path(), str(bad)) == EXIT_VALIDATION


class TestEntryPoint:
    def test_console_script_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "trainsim.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "simulate" in proc.stdout and "validate-profile" in proc.stdout

    def test_unknown_command_usage_exit(self):
        proc = subprocess.run(
            [sys.executable, "-m", "trainsim.cli", "frobnicate"],
            capture_output=True, text=True,
        )
        assert proc.returncode == EXIT_USAGE
