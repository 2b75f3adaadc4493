"""Operator-to-kernel cost resolution and communication-latency models.

Computation operators resolve to kernel lists either from a loaded profile
table or, as a fallback, from an analytical FLOP model at a configured
fraction of peak throughput.  Intra-node collectives interpolate a profiled
latency table; inter-node collectives use the ring latency-bandwidth model
t = S/B * 2(n-1)/n with effective bandwidth B = alpha * B_max.
"""

from __future__ import annotations

import json
import warnings
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum

from .core import HardwareSpec
from .errors import ProfileError, SimulationError


class OpKind(str, Enum):
    FWD_EMBEDDING = "FwdEmbedding"
    FWD_MHA = "FwdMHA"
    FWD_FFN = "FwdFFN"
    FWD_LM_HEAD = "FwdLMHead"
    BWD_LM_HEAD = "BwdLMHead"
    BWD_FFN = "BwdFFN"
    BWD_MHA = "BwdMHA"
    BWD_EMBEDDING = "BwdEmbedding"
    WEIGHT_UPDATE = "WeightUpdate"
    ALL_REDUCE_TP = "AllReduceTP"
    ALL_REDUCE_DP = "AllReduceDP"
    SEND_RECV_PP = "SendRecvPP"

    @property
    def is_communication(self) -> bool:
        return self in (OpKind.ALL_REDUCE_TP, OpKind.ALL_REDUCE_DP, OpKind.SEND_RECV_PP)

    @property
    def is_backward(self) -> bool:
        return self in (OpKind.BWD_LM_HEAD, OpKind.BWD_FFN, OpKind.BWD_MHA, OpKind.BWD_EMBEDDING)


class Scope(str, Enum):
    INTRA_NODE = "intra"
    INTER_NODE = "inter"


@dataclass(frozen=True)
class OperatorSignature:
    """Canonical key of a computation operator: model dims, tensor-parallel
    degree, micro-batch sequences, and the layer count the operator covers.

    Two operator nodes with equal shard shapes hash to the same signature,
    which is what makes the once-per-distinct-operator lookup sound.
    """

    kind: OpKind
    hidden_size: int
    seq_len: int
    num_heads: int
    micro_batch: int
    layers: int = 1
    tensor: int = 1
    vocab: int = 0  # nonzero only for embedding / LM-head kinds

    def __post_init__(self) -> None:
        if not isinstance(self.kind, OpKind):
            object.__setattr__(self, "kind", OpKind(self.kind))


@dataclass(frozen=True)
class KernelEntry:
    kernel_name: str
    duration: float  # seconds

    def __post_init__(self) -> None:
        if self.duration < 0:
            raise ProfileError(f"kernel {self.kernel_name!r} has negative duration")


class CollectiveTable:
    """Profiled collective latencies keyed by (kind, group size), piecewise
    linear in payload bytes.  Beyond the profiled byte range the last segment
    extrapolates linearly (with a warning)."""

    def __init__(self, rows: list[tuple[str, int, int, float]]):
        # rows: (collective kind, group size, payload bytes, latency seconds)
        table: dict[tuple[str, int], dict[int, float]] = {}
        for kind, n, size, latency in rows:
            key = (kind, n)
            points = table.setdefault(key, {})
            if size in points:
                raise ProfileError(f"duplicate collective row ({kind}, n={n}, bytes={size})")
            if latency < 0:
                raise ProfileError(f"negative latency in collective row ({kind}, n={n}, bytes={size})")
            points[size] = latency
        self._curves: dict[tuple[str, int], tuple[list[int], list[float]]] = {}
        for key, points in table.items():
            sizes = sorted(points)
            lats = [points[s] for s in sizes]
            for a, b in zip(lats, lats[1:]):
                if b < a:
                    raise ProfileError(f"latency not monotone in bytes for {key}")
            self._curves[key] = (sizes, lats)

    def group_sizes(self, kind: str) -> list[int]:
        return sorted(n for (k, n) in self._curves if k == kind)

    def covers(self, kind: str, n: int) -> bool:
        return (kind, n) in self._curves

    def lookup(self, kind: str, n: int, size: int | float) -> float:
        key = (kind, n)
        if key not in self._curves:
            raise SimulationError(
                f"intra-node table has no rows for collective {kind!r} with group size {n}"
            )
        sizes, lats = self._curves[key]
        if len(sizes) == 1:
            return lats[0]
        if size <= sizes[0]:
            # below the profiled range the first knot acts as a latency floor
            if size < sizes[0]:
                warnings.warn(
                    f"clamping {kind} n={n} below profiled range "
                    f"({size} < {sizes[0]} bytes)",
                    stacklevel=2,
                )
            return lats[0]
        i = bisect_left(sizes, size)
        if i >= len(sizes):
            lo, hi = len(sizes) - 2, len(sizes) - 1
            warnings.warn(
                f"extrapolating {kind} n={n} beyond profiled range "
                f"({size} > {sizes[-1]} bytes)",
                stacklevel=2,
            )
        else:
            lo, hi = i - 1, i
        x0, x1 = sizes[lo], sizes[hi]
        y0, y1 = lats[lo], lats[hi]
        return y0 + (y1 - y0) * (size - x0) / (x1 - x0)

    def rows(self) -> list[tuple[str, int, int, float]]:
        out = []
        for (kind, n), (sizes, lats) in sorted(self._curves.items()):
            out.extend((kind, n, s, t) for s, t in zip(sizes, lats))
        return out


@dataclass
class CostDatabase:
    """Operator durations plus communication latency models.

    ``flops_mode`` selects the analytical fallback accounting: "shape" keeps
    the attention-score term (per-operator times stay shape-faithful) while
    "six_n" drops it so a full iteration sums to exactly 6*N*tokens.
    """

    hw: HardwareSpec
    op_table: dict[OperatorSignature, list[KernelEntry]] = field(default_factory=dict)
    intra_table: CollectiveTable | None = None
    fallback_enabled: bool = True
    efficiency: float = 0.5
    weight_update_seconds: float = 0.0
    flops_mode: str = "shape"

    def __post_init__(self) -> None:
        if not (0.0 < self.efficiency <= 1.0):
            raise ProfileError(f"efficiency must be in (0, 1], got {self.efficiency}")
        if self.flops_mode not in ("shape", "six_n"):
            raise ProfileError(f"unknown flops_mode {self.flops_mode!r}")
        self._resolve_cache: dict[OperatorSignature, list[KernelEntry]] = {}
        self.resolve_calls = 0  # cache misses; exposed for dedup accounting

    def resolve(self, sig: OperatorSignature) -> list[KernelEntry]:
        """Kernel list for one operator signature; memoized so repeated
        identical operators cost a single lookup."""
        cached = self._resolve_cache.get(sig)
        if cached is not None:
            return cached
        self.resolve_calls += 1
        entry = self.op_table.get(sig)
        if entry is None:
            if not self.fallback_enabled:
                raise SimulationError(f"no profile entry for {sig} and analytical fallback disabled")
            entry = self._fallback(sig)
        self._resolve_cache[sig] = entry
        return entry

    def op_seconds(self, sig: OperatorSignature) -> float:
        return sum(k.duration for k in self.resolve(sig))

    def _fallback(self, sig: OperatorSignature) -> list[KernelEntry]:
        if sig.kind is OpKind.WEIGHT_UPDATE:
            return [KernelEntry("analytic_weight_update", self.weight_update_seconds)]
        flops = op_flops(sig, mode=self.flops_mode)
        duration = flops / (self.hw.peak_flops * self.efficiency)
        return [KernelEntry(f"analytic_{sig.kind.value}", duration)]


def op_flops(sig: OperatorSignature, mode: str = "shape") -> float:
    """Analytical FLOPs of a computation operator's per-GPU shard.

    In "shape" mode the MHA forward includes the 4*b*s^2*h attention-score
    term; "six_n" drops it (and moves the embedding cost onto the LM head) so
    the per-iteration total reduces to the 6*N*tokens convention exactly.
    """
    if sig.kind.is_communication:
        raise SimulationError(f"{sig.kind.value} is a communication operator; use comm_time")
    b, s, h, t = sig.micro_batch, sig.seq_len, sig.hidden_size, sig.tensor
    if sig.kind in (OpKind.FWD_MHA, OpKind.BWD_MHA):
        fwd = 8 * b * s * h * h / t
        if mode == "shape":
            fwd += 4 * b * s * s * h / t
    elif sig.kind in (OpKind.FWD_FFN, OpKind.BWD_FFN):
        fwd = 16 * b * s * h * h / t
    elif sig.kind in (OpKind.FWD_LM_HEAD, OpKind.BWD_LM_HEAD):
        fwd = 2 * b * s * h * sig.vocab / t
        if mode == "six_n":
            # carry the positional-embedding weights here too, so that the
            # per-iteration sum closes to exactly 6 * params * tokens
            fwd = 2 * b * s * h * (sig.vocab + s) / t
    elif sig.kind in (OpKind.FWD_EMBEDDING, OpKind.BWD_EMBEDDING):
        fwd = 0.0
    elif sig.kind is OpKind.WEIGHT_UPDATE:
        return 0.0
    else:  # pragma: no cover
        raise SimulationError(f"unhandled kind {sig.kind}")
    fwd *= sig.layers
    return 2.0 * fwd if sig.kind.is_backward else fwd


def allreduce_time(size_bytes: float, n: int, bandwidth_bits: float) -> float:
    """Ring All-Reduce latency: (8*S/B) * 2(n-1)/n seconds; zero for n = 1."""
    if n < 1:
        raise SimulationError(f"allreduce group size must be >= 1, got {n}")
    if size_bytes < 0 or bandwidth_bits <= 0:
        raise SimulationError("allreduce needs size >= 0 and bandwidth > 0")
    if n == 1:
        return 0.0
    return (8.0 * size_bytes / bandwidth_bits) * (2.0 * (n - 1) / n)


def comm_time(
    kind: OpKind,
    size_bytes: float,
    n: int,
    scope: Scope,
    db: CostDatabase,
    link_share: int = 1,
) -> float:
    """Latency of one communication operator.

    Intra-node lookups interpolate the profiled collective table; inter-node
    All-Reduce uses the ring model over alpha*B_max; Send-Receive transfers
    over one NIC share alpha*B_max/link_share (tensor-parallel ranks moving
    stage-boundary activations share the node's NICs).
    """
    hw = db.hw
    if kind is OpKind.SEND_RECV_PP:
        link = hw.alpha * hw.inter_node_bmax / link_share
        return 8.0 * size_bytes / link
    if scope is Scope.INTRA_NODE:
        if db.intra_table is None:
            raise SimulationError("intra-node scope requires a loaded collective table")
        return db.intra_table.lookup("allreduce", n, size_bytes)
    return allreduce_time(size_bytes, n, hw.alpha * hw.inter_node_bmax)


# ---------------------------------------------------------------------------
# Profile file I/O
#
# Schema: { "ops": [ { "sig": {kind, h, s, n, b, layers, t}, "kernels":
# [ {"name": str, "us": number} ] } ], "collectives": [ {"kind": "allreduce",
# "n": int, "bytes": int, "us": number} ] }.  Durations are microseconds.
# ---------------------------------------------------------------------------

_US = 1e-6


def _sig_from_json(obj: dict, where: str) -> OperatorSignature:
    try:
        return OperatorSignature(
            kind=OpKind(obj["kind"]),
            hidden_size=int(obj["h"]),
            seq_len=int(obj["s"]),
            num_heads=int(obj["n"]),
            micro_batch=int(obj["b"]),
            layers=int(obj.get("layers", 1)),
            tensor=int(obj.get("t", 1)),
            vocab=int(obj.get("V", 0)),
        )
    except (KeyError, ValueError) as exc:
        raise ProfileError(f"{where}: bad operator signature: {exc}") from exc


def _sig_to_json(sig: OperatorSignature) -> dict:
    return {
        "kind": sig.kind.value,
        "h": sig.hidden_size,
        "s": sig.seq_len,
        "n": sig.num_heads,
        "b": sig.micro_batch,
        "layers": sig.layers,
        "t": sig.tensor,
        "V": sig.vocab,
    }


def load_profile(path: str) -> tuple[dict[OperatorSignature, list[KernelEntry]], CollectiveTable | None]:
    """Parse and validate one profile file.

    Returns the operator table fragment and the collective table (or None if
    the file has no collectives section).  Rejects duplicate signatures,
    negative durations, and malformed rows with a path+field diagnostic.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ProfileError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc

    if not isinstance(doc, dict):
        raise ProfileError(f"{path}: top level must be an object")

    ops: dict[OperatorSignature, list[KernelEntry]] = {}
    for i, entry in enumerate(doc.get("ops", [])):
        where = f"{path}: ops[{i}]"
        if "sig" not in entry or "kernels" not in entry:
            raise ProfileError(f"{where}: needs 'sig' and 'kernels'")
        sig = _sig_from_json(entry["sig"], where)
        if sig in ops:
            raise ProfileError(f"{where}: duplicate signature {sig}")
        kernels = []
        for j, k in enumerate(entry["kernels"]):
            try:
                kernels.append(KernelEntry(str(k["name"]), float(k["us"]) * _US))
            except (KeyError, TypeError, ValueError) as exc:
                raise ProfileError(f"{where}.kernels[{j}]: {exc}") from exc
        ops[sig] = kernels

    table = None
    raw = doc.get("collectives", [])
    if raw:
        rows = []
        for i, r in enumerate(raw):
            try:
                rows.append((str(r["kind"]), int(r["n"]), int(r["bytes"]), float(r["us"]) * _US))
            except (KeyError, TypeError, ValueError) as exc:
                raise ProfileError(f"{path}: collectives[{i}]: {exc}") from exc
        try:
            table = CollectiveTable(rows)
        except ProfileError as exc:
            raise ProfileError(f"{path}: {exc}") from exc
    return ops, table


def save_profile(
    path: str,
    ops: dict[OperatorSignature, list[KernelEntry]],
    table: CollectiveTable | None,
    meta: dict | None = None,
) -> None:
    """Write a profile in canonical form (sorted keys, stable ordering) so
    save(load(f)) is byte-stable for canonicalized input."""
    doc: dict = {}
    if meta:
        doc["meta"] = meta
    doc["ops"] = [
        {
            "sig": _sig_to_json(sig),
            "kernels": [{"name": k.kernel_name, "us": k.duration / _US} for k in kernels],
        }
        for sig, kernels in sorted(ops.items(), key=lambda kv: repr(_sig_to_json(kv[0])))
    ]
    doc["collectives"] = [
        {"kind": kind, "n": n, "bytes": size, "us": lat / _US}
        for kind, n, size, lat in (table.rows() if table else [])
    ]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def database_from_files(
    hw: HardwareSpec,
    paths: list[str],
    fallback_enabled: bool = True,
    efficiency: float = 0.5,
    weight_update_seconds: float = 0.0,
    flops_mode: str = "shape",
) -> CostDatabase:
    """Merge one or more profile files into a CostDatabase."""
    ops: dict[OperatorSignature, list[KernelEntry]] = {}
    table: CollectiveTable | None = None
    for p in paths:
        frag_ops, frag_table = load_profile(p)
        for sig, kernels in frag_ops.items():
            if sig in ops:
                raise ProfileError(f"{p}: signature {sig} already defined by an earlier file")
            ops[sig] = kernels
        if frag_table is not None:
            if table is not None:
                raise ProfileError(f"{p}: collective table already loaded from an earlier file")
            table = frag_table
    return CostDatabase(
        hw=hw,
        op_table=ops,
        intra_table=table,
        fallback_enabled=fallback_enabled,
        efficiency=efficiency,
        weight_update_seconds=weight_update_seconds,
        flops_mode=flops_mode,
    )
