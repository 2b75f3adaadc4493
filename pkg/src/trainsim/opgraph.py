"""Operator-granularity execution graphs and their lowering to kernel tasks.

The operator graph has one node per layer-level computation or communication
operator; edges are data dependencies plus pipeline-schedule ordering.  The
task graph is the same structure lowered through the cost database: each
computation expands to its kernel chain on the owning GPU's compute stream,
each collective to one task per participating device on the communication
stream (tensor-parallel All-Reduce serializes with its dependent compute, so
its tasks live on the compute stream).

Two reductions keep large sweeps tractable without changing results:
``representative=True`` builds one data-parallel replica and one tensor rank
(collective costs still use the true group sizes), and
``build_stage_task_graph`` emits per-(stage, micro-batch) aggregate tasks
directly.  Both are equivalence-tested against the full construction.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import FP16_BYTES, ModelConfig, ParallelPlan, Schedule
from .costdb import CostDatabase, OperatorSignature, OpKind, Scope, comm_time
from .errors import GraphError, PlanError

COMPUTE, COMM = 0, 1

_FWD = "F"
_BWD = "B"


@dataclass(slots=True)
class OperatorNode:
    id: int
    kind: OpKind
    gpu: int
    micro_batch: int | None
    layer_range: tuple[int, int]
    comm_bytes: int = 0
    comm_group_size: int = 0
    # bookkeeping beyond the core contract: where the node sits
    stage: int = 0
    replica: int = 0
    tp_rank: int = 0
    layer: int | None = None
    bucket: int | None = None
    direction: str | None = None
    participants: tuple[int, ...] = ()


class OperatorGraph:
    """Immutable-after-build DAG of operator nodes with stable ids."""

    def __init__(self, model: ModelConfig, plan: ParallelPlan, representative: bool):
        self.model = model
        self.plan = plan
        self.representative = representative
        self.nodes: list[OperatorNode] = []
        self.edges: list[tuple[int, int]] = []
        # per (replica, stage, tp, dir, mb): (first op id, last op id) of the chain
        self.chains: dict[tuple[int, int, int, str, int], tuple[int, int]] = {}
        # per (replica, stage, tp, mb, bucket): id of the segment's last grad-producing node
        self.segment_end: dict[tuple[int, int, int, int, int], int] = {}
        # filled by add_schedule_edges: per (replica, stage, tp): [(dir, mb), ...]
        self.unit_order: dict[tuple[int, int, int], list[tuple[str, int]]] = {}
        self.has_schedule_edges = False

    def add_node(self, **kw) -> OperatorNode:
        node = OperatorNode(id=len(self.nodes), **kw)
        self.nodes.append(node)
        return node

    def add_edge(self, u: int, v: int) -> None:
        self.edges.append((u, v))

    def nodes_of_kind(self, kind: OpKind) -> list[OperatorNode]:
        return [n for n in self.nodes if n.kind is kind]

    def distinct_signatures(self) -> set[OperatorSignature]:
        return {
            signature_of(n, self.model, self.plan)
            for n in self.nodes
            if not n.kind.is_communication
        }

    def to_json(self) -> str:
        doc = {
            "model": self.model.name,
            "plan": {
                "t": self.plan.tensor,
                "d": self.plan.data,
                "p": self.plan.pipeline,
                "schedule": self.plan.schedule.value,
            },
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind.value,
                    "gpu": n.gpu,
                    "micro_batch": n.micro_batch,
                    "layer_range": list(n.layer_range),
                    "comm_bytes": n.comm_bytes,
                    "comm_group_size": n.comm_group_size,
                }
                for n in self.nodes
            ],
            "edges": [list(e) for e in self.edges],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def topo_summary(self) -> str:
        order = _toposort(len(self.nodes), self.edges)
        if order is None:
            return "graph contains a cycle"
        lines = [f"{len(self.nodes)} nodes, {len(self.edges)} edges"]
        for nid in order:
            n = self.nodes[nid]
            mb = "-" if n.micro_batch is None else n.micro_batch
            lines.append(f"  [{n.id}] {n.kind.value} gpu={n.gpu} mb={mb}")
        return "\n".join(lines)


def signature_of(node: OperatorNode, model: ModelConfig, plan: ParallelPlan) -> OperatorSignature:
    vocab = 0
    if node.kind in (OpKind.FWD_EMBEDDING, OpKind.BWD_EMBEDDING, OpKind.FWD_LM_HEAD, OpKind.BWD_LM_HEAD):
        vocab = model.vocab_size
    layers = 1
    if node.kind is OpKind.WEIGHT_UPDATE:
        layers = node.layer_range[1] - node.layer_range[0]
    return OperatorSignature(
        kind=node.kind,
        hidden_size=model.hidden_size,
        seq_len=model.seq_len,
        num_heads=model.num_heads,
        micro_batch=plan.micro_batch,
        layers=layers,
        tensor=plan.tensor,
        vocab=vocab,
    )


def stage_intervals(num_layers: int, pipeline: int) -> list[tuple[int, int]]:
    """Contiguous layer interval per stage; remainder layers go to the
    earliest stages."""
    base, extra = divmod(num_layers, pipeline)
    out, lo = [], 0
    for st in range(pipeline):
        size = base + (1 if st < extra else 0)
        out.append((lo, lo + size))
        lo += size
    return out


def bucket_intervals(lo: int, hi: int, buckets: int) -> list[tuple[int, int]]:
    """Split [lo, hi) into contiguous gradient buckets in reverse-layer order:
    bucket 0 holds the deepest layers, so it is the first whose backward
    completes."""
    n = hi - lo
    size = math.ceil(n / buckets)
    out = []
    top = hi
    while top > lo:
        bot = max(lo, top - size)
        out.append((bot, top))
        top = bot
    return out


def gpu_rank(replica: int, stage: int, tp_rank: int, plan: ParallelPlan) -> int:
    return (replica * plan.pipeline + stage) * plan.tensor + tp_rank


def _schedule_units(schedule: Schedule, stage: int, pipeline: int, n_mb: int) -> list[tuple[str, int]]:
    """Per-stage unit order: GPipe runs every forward then the backwards in
    reverse micro-batch order; 1F1B admits min(n_mb, pipeline - stage)
    warm-up forwards, alternates backward/forward, then drains backwards."""
    if schedule is Schedule.GPIPE:
        return [(_FWD, j) for j in range(n_mb)] + [(_BWD, j) for j in reversed(range(n_mb))]
    if schedule is Schedule.ONE_F_ONE_B:
        warm = min(n_mb, pipeline - stage)
        units = [(_FWD, j) for j in range(warm)]
        for i in range(n_mb - warm):
            units.append((_BWD, i))
            units.append((_FWD, warm + i))
        units.extend((_BWD, j) for j in range(n_mb - warm, n_mb))
        return units
    raise PlanError(f"unknown schedule {schedule!r}")


def _grad_bucket_bytes(model: ModelConfig, plan: ParallelPlan, stage: int, b_lo: int, b_hi: int, is_last_bucket: bool) -> int:
    """FP16 gradient bytes of one bucket's per-GPU shard: the bucket's layer
    weights split t ways; the (tied) embedding weights ride in the first
    stage's last-firing bucket."""
    h = model.hidden_size
    params = 12 * h * h * (b_hi - b_lo)
    if stage == 0 and is_last_bucket:
        params += (model.vocab_size + model.seq_len) * h
    return FP16_BYTES * params // plan.tensor


def build_operator_graph(
    model: ModelConfig,
    plan: ParallelPlan,
    representative: bool = False,
    schedule_edges: bool = True,
) -> OperatorGraph:
    """Construct the operator-granularity execution graph for (model, plan).

    With ``representative=True`` only replica 0 / tensor rank 0 is
    materialized; communication nodes keep their true group sizes so the
    lowered timing is identical to the full graph under symmetric costs.
    """
    plan.validate(model)
    g = OperatorGraph(model, plan, representative)
    t, d, p = plan.tensor, plan.data, plan.pipeline
    n_mb = plan.num_micro_batches
    stages = stage_intervals(model.num_layers, p)

    replicas = [0] if representative else list(range(d))
    ranks = [0] if representative else list(range(t))
    act_bytes = FP16_BYTES * plan.micro_batch * model.seq_len * model.hidden_size

    def tp_group(replica: int, stage: int) -> tuple[int, ...]:
        return tuple(gpu_rank(replica, stage, tr, plan) for tr in ranks)

    # pass 1: per-stage forward/backward chains, micro-batch by micro-batch
    for replica in replicas:
        for st, (lo, hi) in enumerate(stages):
            lr = (lo, hi)
            first, last = st == 0, st == p - 1
            for j in range(n_mb):
                _build_fwd_chain(g, plan, replica, st, j, lr, first, last, ranks, act_bytes, tp_group)
                _build_bwd_chain(g, plan, replica, st, j, lr, first, last, ranks, act_bytes, tp_group)
                if last:
                    # loss: forward chain feeds the backward chain directly
                    for tr in ranks:
                        g.add_edge(
                            g.chains[(replica, st, tr, _FWD, j)][1],
                            g.chains[(replica, st, tr, _BWD, j)][0],
                        )

    # pass 2: send-receive at every stage boundary, one per tensor rank pair
    for replica in replicas:
        for st in range(p - 1):
            for j in range(n_mb):
                for tr in ranks:
                    sr = g.add_node(
                        kind=OpKind.SEND_RECV_PP,
                        gpu=gpu_rank(replica, st, tr, plan),
                        micro_batch=j,
                        layer_range=stages[st],
                        comm_bytes=act_bytes,
                        comm_group_size=2,
                        stage=st,
                        replica=replica,
                        tp_rank=tr,
                        direction=_FWD,
                        participants=(
                            gpu_rank(replica, st, tr, plan),
                            gpu_rank(replica, st + 1, tr, plan),
                        ),
                    )
                    g.add_edge(g.chains[(replica, st, tr, _FWD, j)][1], sr.id)
                    g.add_edge(sr.id, g.chains[(replica, st + 1, tr, _FWD, j)][0])
                    srb = g.add_node(
                        kind=OpKind.SEND_RECV_PP,
                        gpu=gpu_rank(replica, st + 1, tr, plan),
                        micro_batch=j,
                        layer_range=stages[st + 1],
                        comm_bytes=act_bytes,
                        comm_group_size=2,
                        stage=st + 1,
                        replica=replica,
                        tp_rank=tr,
                        direction=_BWD,
                        participants=(
                            gpu_rank(replica, st + 1, tr, plan),
                            gpu_rank(replica, st, tr, plan),
                        ),
                    )
                    g.add_edge(g.chains[(replica, st + 1, tr, _BWD, j)][1], srb.id)
                    g.add_edge(srb.id, g.chains[(replica, st, tr, _BWD, j)][0])

    if schedule_edges:
        add_schedule_edges(g)

    # pass 3: data-parallel gradient All-Reduce (per bucket) and weight update
    last_bwd_mb = 0 if plan.schedule is Schedule.GPIPE else n_mb - 1
    for st, (lo, hi) in enumerate(stages):
        buckets = bucket_intervals(lo, hi, plan.grad_buckets)
        for tr in ranks:
            ar_ids = []
            if d > 1:
                for c, (b_lo, b_hi) in enumerate(buckets):
                    size = _grad_bucket_bytes(model, plan, st, b_lo, b_hi, c == len(buckets) - 1)
                    ar = g.add_node(
                        kind=OpKind.ALL_REDUCE_DP,
                        gpu=gpu_rank(0, st, tr, plan),
                        micro_batch=None,
                        layer_range=(lo, hi),
                        comm_bytes=size,
                        comm_group_size=d,
                        stage=st,
                        tp_rank=tr,
                        bucket=c,
                        participants=tuple(gpu_rank(r, st, tr, plan) for r in replicas),
                    )
                    ar_ids.append(ar.id)
                    for replica in replicas:
                        g.add_edge(g.segment_end[(replica, st, tr, last_bwd_mb, c)], ar.id)
            for replica in replicas:
                wu = g.add_node(
                    kind=OpKind.WEIGHT_UPDATE,
                    gpu=gpu_rank(replica, st, tr, plan),
                    micro_batch=None,
                    layer_range=(lo, hi),
                    stage=st,
                    replica=replica,
                    tp_rank=tr,
                )
                if ar_ids:
                    for a in ar_ids:
                        g.add_edge(a, wu.id)
                # serialize after the stage's final backward either way
                g.add_edge(g.chains[(replica, st, tr, _BWD, last_bwd_mb)][1], wu.id)

    return g


def _build_fwd_chain(g, plan, replica, st, j, lr, first, last, ranks, act_bytes, tp_group):
    t = plan.tensor
    prev = {}
    head = {}
    for tr in ranks:
        if first:
            n = g.add_node(
                kind=OpKind.FWD_EMBEDDING,
                gpu=gpu_rank(replica, st, tr, plan),
                micro_batch=j,
                layer_range=lr,
                stage=st,
                replica=replica,
                tp_rank=tr,
            )
            prev[tr] = n.id
            head[tr] = n.id
    for layer in range(lr[0], lr[1]):
        ids = {}
        for tr in ranks:
            n = g.add_node(
                kind=OpKind.FWD_MHA,
                gpu=gpu_rank(replica, st, tr, plan),
                micro_batch=j,
                layer_range=lr,
                stage=st,
                replica=replica,
                tp_rank=tr,
                layer=layer,
            )
            if tr in prev:
                g.add_edge(prev[tr], n.id)
            head.setdefault(tr, n.id)
            ids[tr] = n.id
        prev = _maybe_tp_allreduce(g, plan, replica, st, j, lr, layer, ids, act_bytes, tp_group)
        ids = {}
        for tr in ranks:
            n = g.add_node(
                kind=OpKind.FWD_FFN,
                gpu=gpu_rank(replica, st, tr, plan),
                micro_batch=j,
                layer_range=lr,
                stage=st,
                replica=replica,
                tp_rank=tr,
                layer=layer,
            )
            g.add_edge(prev[tr], n.id)
            ids[tr] = n.id
        prev = _maybe_tp_allreduce(g, plan, replica, st, j, lr, layer, ids, act_bytes, tp_group)
    if last:
        for tr in ranks:
            n = g.add_node(
                kind=OpKind.FWD_LM_HEAD,
                gpu=gpu_rank(replica, st, tr, plan),
                micro_batch=j,
                layer_range=lr,
                stage=st,
                replica=replica,
                tp_rank=tr,
            )
            g.add_edge(prev[tr], n.id)
            head.setdefault(tr, n.id)
            prev[tr] = n.id
    for tr in ranks:
        g.chains[(replica, st, tr, _FWD, j)] = (head[tr], prev[tr])


def _build_bwd_chain(g, plan, replica, st, j, lr, first, last, ranks, act_bytes, tp_group):
    buckets = bucket_intervals(lr[0], lr[1], plan.grad_buckets)
    bucket_of = {}
    for c, (b_lo, b_hi) in enumerate(buckets):
        for layer in range(b_lo, b_hi):
            bucket_of[layer] = c
    prev = {}
    head = {}
    if last:
        for tr in ranks:
            n = g.add_node(
                kind=OpKind.BWD_LM_HEAD,
                gpu=gpu_rank(replica, st, tr, plan),
                micro_batch=j,
                layer_range=lr,
                stage=st,
                replica=replica,
                tp_rank=tr,
            )
            prev[tr] = n.id
            head[tr] = n.id
    for layer in reversed(range(lr[0], lr[1])):
        ids = {}
        for tr in ranks:
            n = g.add_node(
                kind=OpKind.BWD_FFN,
                gpu=gpu_rank(replica, st, tr, plan),
                micro_batch=j,
                layer_range=lr,
                stage=st,
                replica=replica,
                tp_rank=tr,
                layer=layer,
            )
            if tr in prev:
                g.add_edge(prev[tr], n.id)
            head.setdefault(tr, n.id)
            ids[tr] = n.id
        prev = _maybe_tp_allreduce(g, plan, replica, st, j, lr, layer, ids, act_bytes, tp_group)
        ids = {}
        for tr in ranks:
            n = g.add_node(
                kind=OpKind.BWD_MHA,
                gpu=gpu_rank(replica, st, tr, plan),
                micro_batch=j,
                layer_range=lr,
                stage=st,
                replica=replica,
                tp_rank=tr,
                layer=layer,
            )
            g.add_edge(prev[tr], n.id)
            ids[tr] = n.id
        prev = _maybe_tp_allreduce(g, plan, replica, st, j, lr, layer, ids, act_bytes, tp_group)
        if layer == buckets[bucket_of[layer]][0]:
            # chain segment boundary: this bucket's gradients are complete
            for tr in ranks:
                g.segment_end[(replica, st, tr, j, bucket_of[layer])] = prev[tr]
    if first:
        for tr in ranks:
            n = g.add_node(
                kind=OpKind.BWD_EMBEDDING,
                gpu=gpu_rank(replica, st, tr, plan),
                micro_batch=j,
                layer_range=lr,
                stage=st,
                replica=replica,
                tp_rank=tr,
            )
            if tr in prev:
                g.add_edge(prev[tr], n.id)
            head.setdefault(tr, n.id)
            prev[tr] = n.id
            # embedding gradients land in the stage's last-firing bucket
            g.segment_end[(replica, st, tr, j, len(buckets) - 1)] = n.id
    for tr in ranks:
        g.chains[(replica, st, tr, _BWD, j)] = (head[tr], prev[tr])


def _maybe_tp_allreduce(g, plan, replica, st, j, lr, layer, ids, act_bytes, tp_group):
    """Insert one shared All-Reduce node after a block when t > 1;
    returns the per-rank chain heads for the next block."""
    if plan.tensor == 1:
        return ids
    ar = g.add_node(
        kind=OpKind.ALL_REDUCE_TP,
        gpu=gpu_rank(replica, st, 0, plan),
        micro_batch=j,
        layer_range=lr,
        comm_bytes=act_bytes,
        comm_group_size=plan.tensor,
        stage=st,
        replica=replica,
        layer=layer,
        participants=tp_group(replica, st),
    )
    for nid in ids.values():
        g.add_edge(nid, ar.id)
    return {tr: ar.id for tr in ids}


def add_schedule_edges(g: OperatorGraph) -> OperatorGraph:
    """Impose the pipeline schedule as intra-GPU ordering edges between
    consecutive (direction, micro-batch) units."""
    if g.has_schedule_edges:
        raise GraphError("schedule edges already added")
    plan = g.plan
    n_mb = plan.num_micro_batches
    keys = sorted({(r, st, tr) for (r, st, tr, _, _) in g.chains})
    for (replica, st, tr) in keys:
        units = _schedule_units(plan.schedule, st, plan.pipeline, n_mb)
        g.unit_order[(replica, st, tr)] = units
        for (d0, j0), (d1, j1) in zip(units, units[1:]):
            g.add_edge(
                g.chains[(replica, st, tr, d0, j0)][1],
                g.chains[(replica, st, tr, d1, j1)][0],
            )
    g.has_schedule_edges = True
    return g


def validate_graph(g: OperatorGraph) -> list[str]:
    """Structural diagnostics; empty list iff the graph is well formed."""
    out = []
    n = len(g.nodes)
    for u, v in g.edges:
        if not (0 <= u < n and 0 <= v < n):
            out.append(f"edge ({u}, {v}) references a missing node")
    for node in g.nodes:
        if node.kind.is_communication:
            if node.comm_bytes <= 0:
                out.append(f"node {node.id} ({node.kind.value}) has comm_bytes <= 0")
            if node.comm_group_size < 2:
                out.append(f"node {node.id} ({node.kind.value}) has group size < 2")
        elif node.comm_bytes != 0:
            out.append(f"computation node {node.id} carries comm_bytes")
    order = _toposort(n, g.edges)
    if order is None:
        cyc = _find_back_edge(n, g.edges)
        out.append(f"cycle detected through edge {cyc}")
        return out
    indeg = [0] * n
    for _, v in g.edges:
        indeg[v] += 1
    roots = [i for i in range(n) if indeg[i] == 0]
    seen = set(roots)
    dq = deque(roots)
    adj = _adjacency(n, g.edges)
    while dq:
        u = dq.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                dq.append(v)
    unreachable = [i for i in range(n) if i not in seen]
    if unreachable:
        out.append(f"{len(unreachable)} nodes unreachable from any root, e.g. node {unreachable[0]}")
    return out


def _adjacency(n: int, edges: list[tuple[int, int]]) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
    return adj


def _toposort(n: int, edges: list[tuple[int, int]]) -> list[int] | None:
    indeg = [0] * n
    adj = _adjacency(n, edges)
    for _, v in edges:
        indeg[v] += 1
    dq = deque(i for i in range(n) if indeg[i] == 0)
    order = []
    while dq:
        u = dq.popleft()
        order.append(u)
        for v in adj[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                dq.append(v)
    return order if len(order) == n else None


def _find_back_edge(n: int, edges: list[tuple[int, int]]) -> tuple[int, int]:
    # any edge inside the set of nodes that never reached in-degree zero
    indeg = [0] * n
    adj = _adjacency(n, edges)
    for _, v in edges:
        indeg[v] += 1
    dq = deque(i for i in range(n) if indeg[i] == 0)
    while dq:
        u = dq.popleft()
        for v in adj[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                dq.append(v)
    stuck = {i for i in range(n) if indeg[i] > 0}
    for u, v in edges:
        if u in stuck and v in stuck:
            return (u, v)
    raise GraphError("no cycle present")  # pragma: no cover


# ---------------------------------------------------------------------------
# Task-granularity graph
# ---------------------------------------------------------------------------


class TaskGraph:
    """Flat-array task DAG: per task a device, a stream (compute or comm),
    a duration, and a sorted child list in CSR form.  Immutable; simulations
    keep their mutable state (remaining in-degree, start times) per run."""

    __slots__ = ("num_devices", "duration", "device", "stream", "labels", "child_off", "child_idx", "indeg")

    def __init__(self, num_devices, duration, device, stream, labels, child_off, child_idx, indeg):
        self.num_devices = num_devices
        self.duration = duration
        self.device = device
        self.stream = stream
        self.labels = labels
        self.child_off = child_off
        self.child_idx = child_idx
        self.indeg = indeg

    def __len__(self) -> int:
        return len(self.duration)

    def children(self, u: int) -> list[int]:
        return self.child_idx[self.child_off[u] : self.child_off[u + 1]]

    def parents_lists(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(len(self.duration))]
        for u in range(len(self.duration)):
            for v in self.children(u):
                out[v].append(u)
        return out


class TaskGraphBuilder:
    def __init__(self, num_devices: int, keep_labels: bool = True):
        self.num_devices = num_devices
        self._dur: list[float] = []
        self._dev: list[int] = []
        self._stream: list[int] = []
        self._labels: list[str] | None = [] if keep_labels else None
        self._eu: list[int] = []
        self._ev: list[int] = []

    def add_task(self, device: int, stream: int, duration: float, label: str = "") -> int:
        if duration < 0:
            raise GraphError(f"negative task duration {duration}")
        tid = len(self._dur)
        self._dur.append(duration)
        self._dev.append(device)
        self._stream.append(stream)
        if self._labels is not None:
            self._labels.append(label)
        return tid

    def add_edge(self, u: int, v: int) -> None:
        self._eu.append(u)
        self._ev.append(v)

    def build(self) -> TaskGraph:
        n = len(self._dur)
        if self._eu:
            eu = np.asarray(self._eu, dtype=np.int64)
            ev = np.asarray(self._ev, dtype=np.int64)
            order = np.lexsort((ev, eu))  # children sorted ascending per parent
            eu, ev = eu[order], ev[order]
            child_off = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(eu, minlength=n), out=child_off[1:])
            indeg = np.bincount(ev, minlength=n)
            child_idx = ev.tolist()
            child_off = child_off.tolist()
            indeg = indeg.tolist()
        else:
            child_idx = []
            child_off = [0] * (n + 1)
            indeg = [0] * n
        return TaskGraph(
            self.num_devices,
            self._dur,
            self._dev,
            self._stream,
            self._labels,
            child_off,
            child_idx,
            indeg,
        )


def _task_label(node: OperatorNode) -> str:
    if node.kind is OpKind.ALL_REDUCE_DP:
        return f"{node.kind.value}:b{node.bucket}"
    if node.micro_batch is None:
        return node.kind.value
    return f"{node.kind.value}:mb{node.micro_batch}"


def _tp_scope(group: int, db: CostDatabase) -> Scope:
    """Tensor-parallel groups inside one node use the profiled intra-node
    table; groups spanning nodes, or runs without a usable table when the
    analytical fallback is on, use the inter-node ring model."""
    if group <= db.hw.gpus_per_node:
        if db.intra_table is not None and db.intra_table.covers("allreduce", group):
            return Scope.INTRA_NODE
        if not db.fallback_enabled:
            return Scope.INTRA_NODE  # surfaces the missing-table error
        return Scope.INTER_NODE
    return Scope.INTER_NODE


def _stage_of_rank(rank: int, plan: ParallelPlan) -> int:
    return (rank // plan.tensor) % plan.pipeline


def lower_to_tasks(g: OperatorGraph, db: CostDatabase, keep_labels: bool = True) -> TaskGraph:
    """Lower an operator graph to the task-granularity graph.

    Computation nodes expand to their kernel chains (one cost-db lookup per
    distinct signature); communication nodes expand to one equal-duration
    task per participating device, with cross-device edges so no participant
    starts before every participant's predecessors finished.  Per-device
    communication streams get an explicit total order consistent with the
    schedule, so timing never depends on queue arrival accidents.
    """
    if not g.has_schedule_edges:
        raise GraphError("lowering requires schedule edges (see add_schedule_edges)")
    plan, model = g.plan, g.model

    devices = sorted(
        {n.gpu for n in g.nodes if not n.kind.is_communication}
        | {r for n in g.nodes for r in n.participants}
    )
    dev_index = {rank: i for i, rank in enumerate(devices)}

    builder = TaskGraphBuilder(len(devices), keep_labels=keep_labels)
    entries: list[dict[int, int]] = [None] * len(g.nodes)  # node -> {device: first task}
    exits: list[dict[int, int]] = [None] * len(g.nodes)  # node -> {device: last task}

    # positions of (direction, micro-batch) units per (replica, stage, tp)
    unit_pos = {
        key: {unit: i for i, unit in enumerate(units)}
        for key, units in g.unit_order.items()
    }
    comm_sort: dict[int, list[tuple]] = {}  # device -> [(key..., task id)]

    for node in g.nodes:
        if not node.kind.is_communication:
            dev = dev_index[node.gpu]
            kernels = db.resolve(signature_of(node, model, plan))
            label = _task_label(node) if keep_labels else ""
            prev = None
            first = None
            for k in kernels:
                tid = builder.add_task(dev, COMPUTE, k.duration, label)
                if prev is not None:
                    builder.add_edge(prev, tid)
                if first is None:
                    first = tid
                prev = tid
            if first is None:  # empty kernel list: zero-duration placeholder
                first = prev = builder.add_task(dev, COMPUTE, 0.0, label)
            entries[node.id] = {dev: first}
            exits[node.id] = {dev: prev}
            continue

        if node.kind is OpKind.ALL_REDUCE_TP:
            duration = comm_time(
                node.kind, node.comm_bytes, node.comm_group_size,
                _tp_scope(node.comm_group_size, db), db,
            )
            stream = COMPUTE  # serializes with its dependent compute
        elif node.kind is OpKind.ALL_REDUCE_DP:
            duration = comm_time(node.kind, node.comm_bytes, node.comm_group_size, Scope.INTER_NODE, db)
            stream = COMM
        else:  # SendRecvPP
            duration = comm_time(
                node.kind, node.comm_bytes, 2, Scope.INTER_NODE, db, link_share=plan.tensor
            )
            stream = COMM

        label = _task_label(node) if keep_labels else ""
        group_entries = {}
        for i, rank in enumerate(node.participants):
            dev = dev_index[rank]
            tid = builder.add_task(dev, stream, duration, label)
            group_entries[dev] = tid
            if stream == COMM:
                comm_sort.setdefault(dev, []).append(
                    (_comm_sort_key(node, i, rank, plan, unit_pos), tid)
                )
        entries[node.id] = group_entries
        exits[node.id] = dict(group_entries)

    for u, v in g.edges:
        for src in exits[u].values():
            for dst in entries[v].values():
                if src != dst:
                    builder.add_edge(src, dst)

    # explicit total order per communication stream
    for dev, items in comm_sort.items():
        items.sort()
        for (_, a), (_, b) in zip(items, items[1:]):
            builder.add_edge(a, b)

    return builder.build()


def _comm_sort_key(node: OperatorNode, part_index: int, rank: int, plan: ParallelPlan, unit_pos) -> tuple:
    """Canonical position of a communication task on its device's stream:
    receives sort just before their consuming unit, sends just after their
    producing unit, gradient All-Reduces after the final backward unit."""
    replica = node.replica
    tr = node.tp_rank
    if node.kind is OpKind.SEND_RECV_PP:
        stage = _stage_of_rank(rank, plan)
        pos = unit_pos[(replica, stage, tr)][(node.direction, node.micro_batch)]
        rank_class = 1 if part_index == 0 else 0  # participants[0] is the sender
        return (pos, rank_class, 0, node.micro_batch, node.id)
    # AllReduceDP: participants span replicas; tie to that replica's last unit
    replica_of_rank = rank // (plan.pipeline * plan.tensor)
    key = (replica_of_rank, node.stage, tr)
    pos = len(unit_pos[key]) - 1
    return (pos, 2, node.bucket, 0, node.id)


# ---------------------------------------------------------------------------
# Stage-aggregated fast path
# ---------------------------------------------------------------------------


def _unit_positions(schedule: Schedule, stage: int, pipeline: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form schedule positions: (posF[j], posB[j]) of micro-batch j's
    forward and backward units in the stage's unit sequence.  Must agree with
    _schedule_units (tested)."""
    j = np.arange(m, dtype=np.int64)
    if schedule is Schedule.GPIPE:
        return j, 2 * m - 1 - j
    warm = min(m, pipeline - stage)
    pos_f = np.where(j < warm, j, warm + 2 * (j - warm) + 1)
    steady = m - warm
    pos_b = np.where(j < steady, warm + 2 * j, warm + 2 * steady + (j - steady))
    return pos_f, pos_b


def build_stage_task_graph(model: ModelConfig, plan: ParallelPlan, db: CostDatabase, keep_labels: bool = False) -> TaskGraph:
    """Build the representative-replica task graph directly at (stage,
    micro-batch) granularity: one compute task per forward unit, one per
    backward bucket segment, the boundary send/receive pairs, per-bucket
    gradient All-Reduces, and a weight update per stage.

    Timing-equivalent to build_operator_graph + lower_to_tasks because every
    aggregated chain is strictly sequential on one stream and no external
    edge attaches to a chain interior.  Construction is vectorized; sweeps
    call this hundreds of thousands of times.
    """
    plan.validate(model)
    t, d, p = plan.tensor, plan.data, plan.pipeline
    m = plan.num_micro_batches
    stages = stage_intervals(model.num_layers, p)
    act_bytes = FP16_BYTES * plan.micro_batch * model.seq_len * model.hidden_size

    def sig(kind: OpKind, layers: int = 1) -> OperatorSignature:
        vocab = model.vocab_size if kind in (
            OpKind.FWD_EMBEDDING, OpKind.BWD_EMBEDDING, OpKind.FWD_LM_HEAD, OpKind.BWD_LM_HEAD
        ) else 0
        return OperatorSignature(
            kind=kind,
            hidden_size=model.hidden_size,
            seq_len=model.seq_len,
            num_heads=model.num_heads,
            micro_batch=plan.micro_batch,
            layers=layers,
            tensor=t,
            vocab=vocab,
        )

    ar_tp = 0.0
    if t > 1:
        ar_tp = comm_time(OpKind.ALL_REDUCE_TP, act_bytes, t, _tp_scope(t, db), db)
    layer_fwd = db.op_seconds(sig(OpKind.FWD_MHA)) + db.op_seconds(sig(OpKind.FWD_FFN)) + 2 * ar_tp
    layer_bwd = db.op_seconds(sig(OpKind.BWD_FFN)) + db.op_seconds(sig(OpKind.BWD_MHA)) + 2 * ar_tp

    fwd_dur: list[float] = []
    seg_dur: list[list[float]] = []
    ar_dur: list[list[float]] = []
    for st, (lo, hi) in enumerate(stages):
        fw = layer_fwd * (hi - lo)
        if st == 0:
            fw += db.op_seconds(sig(OpKind.FWD_EMBEDDING))
        if st == p - 1:
            fw += db.op_seconds(sig(OpKind.FWD_LM_HEAD))
        fwd_dur.append(fw)
        buckets = bucket_intervals(lo, hi, plan.grad_buckets)
        segs, ars = [], []
        for c, (b_lo, b_hi) in enumerate(buckets):
            seg = layer_bwd * (b_hi - b_lo)
            if st == p - 1 and c == 0:
                seg += db.op_seconds(sig(OpKind.BWD_LM_HEAD))
            if st == 0 and c == len(buckets) - 1:
                seg += db.op_seconds(sig(OpKind.BWD_EMBEDDING))
            segs.append(seg)
            if d > 1:
                size = _grad_bucket_bytes(model, plan, st, b_lo, b_hi, c == len(buckets) - 1)
                ars.append(comm_time(OpKind.ALL_REDUCE_DP, size, d, Scope.INTER_NODE, db))
        seg_dur.append(segs)
        ar_dur.append(ars)

    sendrecv = 0.0
    if p > 1:
        sendrecv = comm_time(OpKind.SEND_RECV_PP, act_bytes, 2, Scope.INTER_NODE, db, link_share=t)
    wu_dur = db.op_seconds(sig(OpKind.WEIGHT_UPDATE))

    # -- task id layout ------------------------------------------------------
    # compute block per stage: m stripes of [fwd, seg_0 .. seg_{k-1}]
    k_st = [len(s) for s in seg_dur]
    stride = [1 + k for k in k_st]
    a_off = np.zeros(p + 1, dtype=np.int64)
    np.cumsum(np.asarray(stride, dtype=np.int64) * m, out=a_off[1:])
    nc = int(a_off[p])
    jj = np.arange(m, dtype=np.int64)
    fwd_id = [a_off[st] + jj * stride[st] for st in range(p)]
    bwd_first = [fwd_id[st] + 1 for st in range(p)]
    bwd_last = [fwd_id[st] + k_st[st] for st in range(p)]
    # send/recv blocks: [sendF, recvF] then [sendB, recvB] per boundary stripe
    nb = m * (p - 1)
    sf = [nc + 2 * (b * m) + 2 * jj for b in range(p - 1)]
    rf = [x + 1 for x in sf]
    nf = nc + 2 * nb
    sb = [nf + 2 * (b * m) + 2 * jj for b in range(p - 1)]
    rb = [x + 1 for x in sb]
    nn = nf + 2 * nb
    # per stage: gradient All-Reduces (d > 1) then the weight update
    n_ar = [len(a) for a in ar_dur]
    d_off = np.zeros(p + 1, dtype=np.int64)
    np.cumsum(np.asarray(n_ar, dtype=np.int64) + 1, out=d_off[1:])
    d_off += nn
    ar_id = [np.arange(d_off[st], d_off[st] + n_ar[st], dtype=np.int64) for st in range(p)]
    wu_id = [int(d_off[st]) + n_ar[st] for st in range(p)]
    n_tasks = int(d_off[p])

    # -- durations / devices / streams ---------------------------------------
    duration = np.empty(n_tasks, dtype=np.float64)
    device = np.empty(n_tasks, dtype=np.int64)
    stream = np.zeros(n_tasks, dtype=np.int64)
    for st in range(p):
        block = np.tile(np.asarray([fwd_dur[st]] + seg_dur[st], dtype=np.float64), m)
        duration[a_off[st] : a_off[st + 1]] = block
        device[a_off[st] : a_off[st + 1]] = st
    if p > 1:
        duration[nc:nn] = sendrecv
        stream[nc:nn] = COMM
        for b in range(p - 1):
            device[nc + 2 * b * m : nc + 2 * (b + 1) * m] = np.tile(
                np.asarray([b, b + 1], dtype=np.int64), m
            )
            device[nf + 2 * b * m : nf + 2 * (b + 1) * m] = np.tile(
                np.asarray([b + 1, b], dtype=np.int64), m
            )
    for st in range(p):
        lo = int(d_off[st])
        duration[lo : lo + n_ar[st]] = ar_dur[st]
        stream[lo : lo + n_ar[st]] = COMM
        duration[wu_id[st]] = wu_dur
        device[lo : lo + n_ar[st] + 1] = st

    # -- edges ----------------------------------------------------------------
    eu: list[np.ndarray] = []
    ev: list[np.ndarray] = []

    def edges(us, vs):
        eu.append(np.asarray(us, dtype=np.int64))
        ev.append(np.asarray(vs, dtype=np.int64))

    for st in range(p):
        for c in range(k_st[st] - 1):  # chain backward segments
            edges(bwd_first[st] + c, bwd_first[st] + c + 1)
    edges(fwd_id[p - 1], bwd_first[p - 1])  # loss
    for b in range(p - 1):
        edges(fwd_id[b], sf[b])
        edges(fwd_id[b], rf[b])
        edges(sf[b], fwd_id[b + 1])
        edges(rf[b], fwd_id[b + 1])
        edges(bwd_last[b + 1], sb[b])
        edges(bwd_last[b + 1], rb[b])
        edges(sb[b], bwd_first[b])
        edges(rb[b], bwd_first[b])

    last_mb = 0 if plan.schedule is Schedule.GPIPE else m - 1
    for st in range(p):
        pos_f, pos_b = _unit_positions(plan.schedule, st, p, m)
        first_at = np.empty(2 * m, dtype=np.int64)
        last_at = np.empty(2 * m, dtype=np.int64)
        first_at[pos_f] = fwd_id[st]
        last_at[pos_f] = fwd_id[st]
        first_at[pos_b] = bwd_first[st]
        last_at[pos_b] = bwd_last[st]
        edges(last_at[:-1], first_at[1:])

        # canonical total order of this stage's communication stream
        ids, pos, cls, tie = [], [], [], []

        def comm_entry(task_ids, positions, klass, ties):
            ids.append(task_ids)
            pos.append(positions)
            cls.append(np.full(len(task_ids), klass, dtype=np.int64))
            tie.append(ties)

        if st > 0:
            comm_entry(rf[st - 1], pos_f, 0, jj)
            comm_entry(sb[st - 1], pos_b, 1, jj)
        if st < p - 1:
            comm_entry(sf[st], pos_f, 1, jj)
            comm_entry(rb[st], pos_b, 0, jj)
        if n_ar[st]:
            comm_entry(
                ar_id[st],
                np.full(n_ar[st], 2 * m - 1, dtype=np.int64),
                2,
                np.arange(n_ar[st], dtype=np.int64),
            )
            seg_tasks = int(bwd_first[st][last_mb]) + np.arange(n_ar[st], dtype=np.int64)
            edges(seg_tasks, ar_id[st])
            edges(ar_id[st], np.full(n_ar[st], wu_id[st], dtype=np.int64))
        edges([int(bwd_last[st][last_mb])], [wu_id[st]])
        if ids:
            cid = np.concatenate(ids)
            order = np.lexsort((cid, np.concatenate(tie), np.concatenate(cls), np.concatenate(pos)))
            chain = cid[order]
            if len(chain) > 1:
                edges(chain[:-1], chain[1:])

    labels = None
    if keep_labels:
        labels = [""] * n_tasks
        for st in range(p):
            for j in range(m):
                labels[int(fwd_id[st][j])] = f"Fwd:mb{j}"
                for c in range(k_st[st]):
                    labels[int(bwd_first[st][j]) + c] = f"Bwd:mb{j}:b{c}"
        for b in range(p - 1):
            for j in range(m):
                labels[int(sf[b][j])] = f"SendF:mb{j}"
                labels[int(rf[b][j])] = f"RecvF:mb{j}"
                labels[int(sb[b][j])] = f"SendB:mb{j}"
                labels[int(rb[b][j])] = f"RecvB:mb{j}"
        for st in range(p):
            for c in range(n_ar[st]):
                labels[int(ar_id[st][c])] = f"AllReduceDP:b{c}"
            labels[wu_id[st]] = "WeightUpdate"

    return _finalize_arrays(p, duration, device, stream, labels, np.concatenate(eu), np.concatenate(ev))


def _finalize_arrays(num_devices, duration, device, stream, labels, eu, ev) -> TaskGraph:
    n = len(duration)
    order = np.lexsort((ev, eu))
    eu, ev = eu[order], ev[order]
    child_off = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(eu, minlength=n), out=child_off[1:])
    indeg = np.bincount(ev, minlength=n)
    return TaskGraph(
        num_devices,
        duration.tolist(),
        device.tolist(),
        stream.tolist(),
        labels,
        child_off.tolist(),
        ev.tolist(),
        indeg.tolist(),
    )
