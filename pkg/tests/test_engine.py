import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trainsim.core import HardwareSpec, ModelConfig, ParallelPlan, Schedule, TrainingRun
from trainsim.costdb import CostDatabase, KernelEntry, OpKind
from trainsim.engine import (
    brute_force_makespan,
    end_to_end,
    export_timeline_csv,
    peak_inflight_forwards,
    simulate_iteration,
)
from trainsim.errors import SimulationError
from trainsim.opgraph import (
    COMM,
    COMPUTE,
    TaskGraph,
    TaskGraphBuilder,
    build_operator_graph,
    build_stage_task_graph,
    lower_to_tasks,
    signature_of,
)


def graph(tasks, edges, num_devices=None):
    """tasks: [(device, stream, duration)]"""
    n_dev = num_devices or (max(t[0] for t in tasks) + 1 if tasks else 1)
    b = TaskGraphBuilder(n_dev)
    for dev, stream, dur in tasks:
        b.add_task(dev, stream, dur, "")
    for u, v in edges:
        b.add_edge(u, v)
    return b.build()


def random_dag(rng: random.Random, max_tasks=50, max_devices=4):
    n = rng.randint(1, max_tasks)
    n_dev = rng.randint(1, max_devices)
    tasks = [
        (rng.randrange(n_dev), rng.choice([COMPUTE, COMM]), rng.random() * 10)
        for _ in range(n)
    ]
    edges = []
    for v in range(1, n):
        for u in range(v):
            if rng.random() < 2.0 / (v + 1):
                edges.append((u, v))
    return graph(tasks, edges, n_dev)


class TestSimulateExamples:
    def test_two_tasks_one_stream_serialize(self):
        tg = graph([(0, 0, 10e-3), (0, 0, 5e-3)], [])
        assert simulate_iteration(tg).iter_time == pytest.approx(15e-3)

    def test_cross_device_chain(self):
        tg = graph([(0, 0, 10e-3), (1, 0, 5e-3)], [(0, 1)])
        assert simulate_iteration(tg).iter_time == pytest.approx(15e-3)

    def test_diamond(self):
        # A(dev0,2) -> {B(dev0,3), C(dev1,4)} -> D(dev1,1): D starts at 6
        tg = graph([(0, 0, 2.0), (0, 0, 3.0), (1, 0, 4.0), (1, 0, 1.0)],
                   [(0, 1), (0, 2), (1, 3), (2, 3)])
        assert simulate_iteration(tg).iter_time == 7.0

    def test_empty_graph(self):
        tg = graph([], [], num_devices=1)
        assert simulate_iteration(tg).iter_time == 0.0
        assert brute_force_makespan(tg) == 0.0

    def test_single_task(self):
        tg = graph([(0, 1, 42.0)], [])
        assert simulate_iteration(tg).iter_time == 42.0
        assert brute_force_makespan(tg) == 42.0

    def test_streams_run_concurrently(self):
        tg = graph([(0, COMPUTE, 10.0), (0, COMM, 4.0)], [])
        res = simulate_iteration(tg)
        assert res.iter_time == 10.0
        assert res.per_device_busy[0] == (10.0, 4.0)

    def test_cycle_reports_stuck_task(self):
        tg = graph([(0, 0, 1.0), (0, 0, 1.0)], [(0, 1), (1, 0)])
        with pytest.raises(SimulationError, match="cycle"):
            simulate_iteration(tg)

    def test_timeline_trace(self):
        tg = graph([(0, 0, 2.0), (0, 0, 3.0)], [(0, 1)])
        res = simulate_iteration(tg, want_timeline=True)
        assert res.timeline == [(0, 0, "", 0.0, 2.0), (0, 0, "", 2.0, 5.0)]

    def test_timeline_csv_export(self, tmp_path):
        tg = graph([(0, 0, 2.0), (1, 1, 3.0)], [(0, 1)])
        res = simulate_iteration(tg, want_timeline=True)
        path = tmp_path / "tl.csv"
        export_timeline_csv(res.timeline, str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "device,stream,task_label,start_us,end_us"
        assert len(lines) == 3


class TestOracleEquivalence:
    def test_examples_match_oracle(self):
        cases = [
            graph([(0, 0, 10e-3), (0, 0, 5e-3)], []),
            graph([(0, 0, 10e-3), (1, 0, 5e-3)], [(0, 1)]),
            graph([(0, 0, 2.0), (0, 0, 3.0), (1, 0, 4.0), (1, 0, 1.0)],
                  [(0, 1), (0, 2), (1, 3), (2, 3)]),
        ]
        for tg in cases:
            assert simulate_iteration(tg).iter_time == brute_force_makespan(tg)

    def test_thousand_random_dags(self):
        rng = random.Random(20240817)
        for _ in range(1000):
            tg = random_dag(rng)
            assert simulate_iteration(tg).iter_time == brute_force_makespan(tg)

    def test_size_guard(self):
        tg = graph([(0, 0, 1.0)] * 300, [])
        with pytest.raises(SimulationError, match="limit"):
            brute_force_makespan(tg)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=120, deadline=None)
    def test_random_dags_property(self, seed):
        tg = random_dag(random.Random(seed))
        assert simulate_iteration(tg).iter_time == brute_force_makespan(tg)


class TestEngineProperties:
    def test_extra_edge_never_speeds_up_without_contention(self):
        # with one task per device there is no stream serialization and the
        # makespan is the pure longest path, which is monotone in the edge
        # set; under shared streams FIFO list scheduling exhibits the classic
        # anomaly (see test below), so the property only holds here
        rng = random.Random(7)
        for _ in range(100):
            n = rng.randint(2, 30)
            tasks = [(i, COMPUTE, rng.random() * 10) for i in range(n)]
            edges = [(u, v) for v in range(1, n) for u in range(v) if rng.random() < 0.1]
            tg = graph(tasks, edges, num_devices=n)
            base = simulate_iteration(tg).iter_time
            v = rng.randrange(1, n)
            u = rng.randrange(0, v)
            tg2 = graph(tasks, edges + [(u, v)], num_devices=n)
            assert simulate_iteration(tg2).iter_time >= base - 1e-15

    def test_fifo_scheduling_anomaly_exists(self):
        # adding a dependency can REDUCE the FIFO-scheduled makespan by
        # reordering a shared stream; freezing one seeded instance documents
        # that the monotonicity claim cannot hold unconditionally
        rng = random.Random(7)
        found = None
        for _ in range(300):
            tg = random_dag(rng, max_tasks=30)
            base = simulate_iteration(tg).iter_time
            n = len(tg)
            if n < 2:
                continue
            v = rng.randrange(1, n)
            u = rng.randrange(0, v)
            b = TaskGraphBuilder(tg.num_devices)
            for i in range(n):
                b.add_task(tg.device[i], tg.stream[i], tg.duration[i], "")
            for i in range(n):
                for c in tg.children(i):
                    b.add_edge(i, c)
            b.add_edge(u, v)
            after = simulate_iteration(b.build()).iter_time
            if after < base - 1e-9:
                found = (base, after)
                break
        assert found is not None

    def test_duration_scaling(self):
        rng = random.Random(11)
        for _ in range(50):
            tg = random_dag(rng, max_tasks=30)
            base = simulate_iteration(tg).iter_time
            c = 3.5
            b = TaskGraphBuilder(tg.num_devices)
            for i in range(len(tg)):
                b.add_task(tg.device[i], tg.stream[i], tg.duration[i] * c, "")
            for i in range(len(tg)):
                for ch in tg.children(i):
                    b.add_edge(i, ch)
            assert simulate_iteration(b.build()).iter_time == pytest.approx(base * c, rel=1e-12)

    def test_determinism(self):
        rng = random.Random(13)
        tg = random_dag(rng)
        a = simulate_iteration(tg, want_timeline=True)
        b = simulate_iteration(tg, want_timeline=True)
        assert a.iter_time == b.iter_time
        assert a.timeline == b.timeline


def uniform_pipeline_db(model, plan, f, bwd):
    """Profile table giving every stage the same forward (f) and backward
    (bwd) duration: MHA+FFN split evenly, embedding/LM-head free."""
    g = build_operator_graph(model, plan, representative=True)
    table = {}
    per_layer_f = f / (model.num_layers // plan.pipeline)
    per_layer_b = bwd / (model.num_layers // plan.pipeline)
    for sig in g.distinct_signatures():
        if sig.kind in (OpKind.FWD_MHA, OpKind.FWD_FFN):
            dur = per_layer_f / 2
        elif sig.kind in (OpKind.BWD_MHA, OpKind.BWD_FFN):
            dur = per_layer_b / 2
        else:
            dur = 0.0
        table[sig] = [KernelEntry("k", dur)]
    hw = HardwareSpec(inter_node_bmax=float("inf"))
    return CostDatabase(hw=hw, op_table=table, fallback_enabled=False)


def pipeline_model(p):
    return ModelConfig("pipe", 64, max(p, 1), 4, 32, vocab_size=64)


class TestPipelineAnalytics:
    @pytest.mark.parametrize("p", [1, 2, 3, 4, 8])
    @pytest.mark.parametrize("m", [1, 2, 4, 8])
    def test_gpipe_fill_drain_formula(self, p, m):
        f, bwd = 2.0, 3.0
        model = pipeline_model(p)
        plan = ParallelPlan(1, 1, p, global_batch=m, micro_batch=1, schedule=Schedule.GPIPE)
        db = uniform_pipeline_db(model, plan, f, bwd)
        tg = lower_to_tasks(g=build_operator_graph(model, plan, representative=True), db=db)
        assert simulate_iteration(tg).iter_time == (p + m - 1) * (f + bwd)

    @pytest.mark.parametrize("p", [1, 2, 4, 8])
    @pytest.mark.parametrize("m", [1, 4, 8])
    def test_1f1b_matches_gpipe_uniform(self, p, m):
        f, bwd = 2.0, 3.0
        model = pipeline_model(p)
        plan = ParallelPlan(1, 1, p, global_batch=m, micro_batch=1, schedule=Schedule.ONE_F_ONE_B)
        db = uniform_pipeline_db(model, plan, f, bwd)
        tg = lower_to_tasks(g=build_operator_graph(model, plan, representative=True), db=db)
        assert simulate_iteration(tg).iter_time == (p + m - 1) * (f + bwd)

    def test_inflight_occupancy_caps(self):
        f, bwd = 2.0, 3.0
        p, m = 4, 8
        model = pipeline_model(p)
        results = {}
        for schedule in (Schedule.GPIPE, Schedule.ONE_F_ONE_B):
            plan = ParallelPlan(1, 1, p, global_batch=m, micro_batch=1, schedule=schedule)
            db = uniform_pipeline_db(model, plan, f, bwd)
            tg = lower_to_tasks(
                g=build_operator_graph(model, plan, representative=True), db=db, keep_labels=True
            )
            res = simulate_iteration(tg, want_timeline=True)
            results[schedule] = max(peak_inflight_forwards(res.timeline, dev) for dev in range(p))
        assert results[Schedule.ONE_F_ONE_B] <= p
        assert results[Schedule.GPIPE] <= m
        assert results[Schedule.ONE_F_ONE_B] < results[Schedule.GPIPE]


class TestBucketingOverlap:
    def run_case(self, buckets, ar_seconds, layer_compute):
        layers = 4
        model = ModelConfig("bucket", 64, layers, 4, 32, vocab_size=64)
        plan = ParallelPlan(1, 2, 1, global_batch=2, micro_batch=1, grad_buckets=buckets)
        g = build_operator_graph(model, plan, representative=True)
        table = {}
        for sig in g.distinct_signatures():
            if sig.kind in (OpKind.FWD_MHA, OpKind.FWD_FFN, OpKind.BWD_MHA, OpKind.BWD_FFN):
                dur = layer_compute / 2
            else:
                dur = 0.0
            table[sig] = [KernelEntry("k", dur)]
        db = CostDatabase(hw=HardwareSpec(), op_table=table, fallback_enabled=False)

        # pin every DP All-Reduce to exactly ar_seconds
        from trainsim import opgraph as og

        tg_builder_orig = og.comm_time

        def pinned_comm_time(kind, size, n, scope, db_, link_share=1):
            return ar_seconds

        og.comm_time = pinned_comm_time
        try:
            tg = lower_to_tasks(g=g, db=db, keep_labels=True)
        finally:
            og.comm_time = tg_builder_orig
        return simulate_iteration(tg).iter_time

    def test_overlap_exposes_single_bucket(self):
        # two buckets of two layers each: bucket 0's All-Reduce (on the comm
        # stream) is hidden behind bucket 1's backward compute, leaving
        # exactly one bucket's All-Reduce exposed on the critical path
        layer_compute = 1.0
        ar = 1.5  # <= next bucket's backward time (2 layers x 1s)
        compute_only = self.run_case(buckets=2, ar_seconds=0.0, layer_compute=layer_compute)
        with_ar = self.run_case(buckets=2, ar_seconds=ar, layer_compute=layer_compute)
        assert with_ar - compute_only == pytest.approx(ar, rel=1e-12)

    def test_no_bucketing_pays_full_allreduce(self):
        layer_compute = 1.0
        ar = 1.5
        compute_only = self.run_case(buckets=1, ar_seconds=0.0, layer_compute=layer_compute)
        with_ar = self.run_case(buckets=1, ar_seconds=ar, layer_compute=layer_compute)
        # the single All-Reduce fires after the whole backward pass
        assert with_ar - compute_only == pytest.approx(ar, rel=1e-12)

    def test_bucketed_beats_unbucketed(self):
        layer_compute = 1.0
        ar = 1.5
        k2 = self.run_case(buckets=2, ar_seconds=ar, layer_compute=layer_compute)
        k1 = self.run_case(buckets=1, ar_seconds=2 * ar, layer_compute=layer_compute)
        # same total gradient traffic, but bucketing overlaps half of it
        assert k2 < k1


class TestEndToEnd:
    def run_for(self, iter_time, gpus_plan=(8, 8, 35)):
        t, d, p = gpus_plan
        model = ModelConfig("mtnlg", 20480, 105, 128, 2048)
        plan = ParallelPlan(t, d, p, global_batch=1920, micro_batch=1)
        hw = HardwareSpec()
        return TrainingRun(model, plan, hw, total_tokens=270e9, iterations_override=68_000)

    def test_published_days_row1(self):
        run = self.run_for(45.40)
        res = end_to_end(run, 45.40)
        assert res.end_to_end_days == pytest.approx(35.73, rel=5e-3)

    def test_published_days_finding_row1(self):
        run = self.run_for(48.37, (8, 12, 21))
        res = end_to_end(run, 48.37)
        assert res.end_to_end_days == pytest.approx(38.07, rel=5e-3)

    def test_utilization_six_n(self):
        run = self.run_for(45.40)
        res = end_to_end(run, 45.40)
        assert res.utilization == pytest.approx(0.394, abs=0.005)
        assert abs(100 * res.utilization - 40.03) < 1.5

    def test_utilization_invariant_across_plans(self):
        # utilization * iter_time * G is constant for fixed model and batch
        runs = [(45.40, (8, 8, 35)), (37.23, (8, 10, 35)), (34.61, (8, 24, 15))]
        products = []
        for iter_time, tdp in runs:
            run = self.run_for(iter_time, tdp)
            res = end_to_end(run, iter_time)
            products.append(res.utilization * iter_time * run.plan.gpus)
        assert max(products) == pytest.approx(min(products), rel=1e-12)

    def test_rejects_nonpositive_iter_time(self):
        with pytest.raises(SimulationError):
            end_to_end(self.run_for(1.0), 0.0)


class TestFastPathEquivalence:
    @pytest.mark.parametrize("schedule", [Schedule.GPIPE, Schedule.ONE_F_ONE_B])
    @pytest.mark.parametrize("t,d,p,k", [
        (1, 1, 1, 1), (1, 1, 3, 1), (1, 2, 2, 2), (2, 1, 2, 1),
        (2, 2, 3, 2), (4, 2, 1, 3), (1, 4, 5, 2),
    ])
    def test_matches_faithful_lowering(self, schedule, t, d, p, k):
        from trainsim.costdb import CollectiveTable
        from trainsim.profiles import synthetic_collective_rows

        model = ModelConfig("eq", 64, 5, 4, 32, vocab_size=100)
        plan = ParallelPlan(t, d, p, global_batch=8, micro_batch=1,
                            schedule=schedule, grad_buckets=k)
        db = CostDatabase(
            hw=HardwareSpec(),
            efficiency=1.0,
            intra_table=CollectiveTable(synthetic_collective_rows()),
            weight_update_seconds=1e-6,
        )
        ref = simulate_iteration(
            lower_to_tasks(g=build_operator_graph(model, plan, representative=True), db=db)
        ).iter_time
        fast = simulate_iteration(build_stage_task_graph(model, plan, db)).iter_time
        assert fast == pytest.approx(ref, rel=1e-12)

    def test_full_topology_matches_representative(self):
        from trainsim.costdb import CollectiveTable
        from trainsim.profiles import synthetic_collective_rows

        model = ModelConfig("eq", 64, 4, 4, 32, vocab_size=100)
        db = CostDatabase(
            hw=HardwareSpec(), efficiency=1.0,
            intra_table=CollectiveTable(synthetic_collective_rows()),
        )
        for (t, d, p) in [(2, 2, 2), (1, 3, 2), (2, 1, 1)]:
            plan = ParallelPlan(t, d, p, global_batch=6, micro_batch=1)
            full = simulate_iteration(
                lower_to_tasks(g=build_operator_graph(model, plan), db=db)
            ).iter_time
            repr_ = simulate_iteration(
                lower_to_tasks(g=build_operator_graph(model, plan, representative=True), db=db)
            ).iter_time
            assert full == pytest.approx(repr_, rel=1e-12)
