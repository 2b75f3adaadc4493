"""Model, hardware, and parallelization-plan types plus the closed-form
arithmetic (parameters, FLOPs, tokens, iterations, memory, dollars) the rest
of the simulator consumes.

All functions here are pure; every quantity is in base SI units (bytes,
seconds, FLOPs) unless the name says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .errors import PlanError

SECONDS_PER_DAY = 86_400.0
FP16_BYTES = 2

# Mixed-precision Adam: fp16 weights+grads (2+2) plus fp32 master weights,
# momentum and variance (4+4+4), plus fp16 scratch ~= 18 bytes per parameter.
ADAM_STATE_BYTES_PER_PARAM = 18
# Per-layer activation footprint of one sequence slot, bytes per (token x
# hidden): standard transformer estimate incl. attention scratch.
ACTIVATION_BYTES_FACTOR = 34


class Schedule(str, Enum):
    """Pipeline schedule: all-forward-then-all-backward vs interleaved."""

    GPIPE = "gpipe"
    ONE_F_ONE_B = "1f1b"


@dataclass(frozen=True)
class ModelConfig:
    """Decoder-only transformer hyperparameters."""

    name: str
    hidden_size: int
    num_layers: int
    num_heads: int
    seq_len: int
    vocab_size: int = 51_200

    def __post_init__(self) -> None:
        for f in ("hidden_size", "num_layers", "num_heads", "seq_len", "vocab_size"):
            if getattr(self, f) < 1:
                raise PlanError(f"ModelConfig.{f} must be >= 1, got {getattr(self, f)}")
        if self.hidden_size % self.num_heads != 0:
            raise PlanError(
                f"hidden_size ({self.hidden_size}) must be divisible by "
                f"num_heads ({self.num_heads})"
            )


@dataclass(frozen=True)
class ParallelPlan:
    """(t, d, p)-way 3D parallelism plus batching and schedule choices.

    ``tensor`` splits attention heads and FC matrices t ways, ``data``
    replicates the model d ways over batch shards, ``pipeline`` partitions
    layers into p stages.  ``grad_buckets`` = 1 means no gradient bucketing.
    """

    tensor: int
    data: int
    pipeline: int
    global_batch: int
    micro_batch: int
    schedule: Schedule = Schedule.ONE_F_ONE_B
    grad_buckets: int = 1

    def __post_init__(self) -> None:
        for f in ("tensor", "data", "pipeline", "global_batch", "micro_batch", "grad_buckets"):
            if getattr(self, f) < 1:
                raise PlanError(f"ParallelPlan.{f} must be >= 1, got {getattr(self, f)}")
        if not isinstance(self.schedule, Schedule):
            object.__setattr__(self, "schedule", Schedule(self.schedule))

    @property
    def gpus(self) -> int:
        return self.tensor * self.data * self.pipeline

    @property
    def num_micro_batches(self) -> int:
        return self.global_batch // (self.data * self.micro_batch)

    def violations(self, model: ModelConfig) -> list[str]:
        """Reasons this plan is invalid for ``model``; empty list if valid."""
        out = []
        if model.num_heads % self.tensor != 0:
            out.append(f"tensor degree {self.tensor} does not divide num_heads {model.num_heads}")
        if model.hidden_size % self.tensor != 0:
            out.append(f"tensor degree {self.tensor} does not divide hidden_size {model.hidden_size}")
        if self.pipeline > model.num_layers:
            out.append(f"pipeline degree {self.pipeline} exceeds num_layers {model.num_layers}")
        if self.global_batch % (self.data * self.micro_batch) != 0:
            out.append(
                f"data*micro_batch ({self.data}*{self.micro_batch}) does not divide "
                f"global_batch {self.global_batch}"
            )
        return out

    def validate(self, model: ModelConfig) -> None:
        problems = self.violations(model)
        if problems:
            raise PlanError("; ".join(problems))


@dataclass(frozen=True)
class HardwareSpec:
    """Per-GPU and per-node hardware characteristics.

    ``inter_node_bmax`` is the aggregate NIC bandwidth of one node in bits/s;
    ``alpha`` scales it to the effective collective bandwidth.
    """

    gpus_per_node: int = 8
    peak_flops: float = 312e12  # A100 FP16
    gpu_mem_bytes: float = 80e9
    inter_node_bmax: float = 800e9  # 4 x 200 Gbps HDR
    alpha: float = 1.0
    dollars_per_gpu_hour: float = 5.0
    intra_node_profile: str | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise PlanError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.peak_flops <= 0 or self.inter_node_bmax <= 0:
            raise PlanError("peak_flops and inter_node_bmax must be positive")


@dataclass(frozen=True)
class TrainingRun:
    """A model trained under a plan on given hardware for a token budget."""

    model: ModelConfig
    plan: ParallelPlan
    hw: HardwareSpec
    total_tokens: float
    iterations_override: int | None = None

    @property
    def iterations(self) -> int:
        if self.iterations_override is not None:
            if self.iterations_override < 1:
                raise PlanError("iterations_override must be >= 1")
            return self.iterations_override
        return iterations_for_tokens(self.total_tokens, tokens_per_iteration(self.plan, self.model))


def param_count(model: ModelConfig) -> int:
    """Total trainable parameters: 12*L*h^2 decoder weights plus (V+s)*h
    word/position embeddings (LM head is tied to the word embedding)."""
    h, big_l = model.hidden_size, model.num_layers
    return 12 * big_l * h * h + (model.vocab_size + model.seq_len) * h


def flops_per_iteration(model: ModelConfig, tokens_per_iter: float, multiplier: int = 6) -> float:
    """Training FLOPs of one iteration under the C = multiplier*N*T convention.

    multiplier 6 = forward (2N) + backward (4N) per token; use 8 when full
    activation recomputation replays the forward pass.
    """
    if tokens_per_iter <= 0:
        raise PlanError("tokens_per_iter must be positive")
    return float(multiplier) * param_count(model) * tokens_per_iter


def tokens_per_iteration(plan: ParallelPlan, model: ModelConfig) -> int:
    return plan.global_batch * model.seq_len


def iterations_for_tokens(total_tokens: float, tokens_per_iter: float) -> int:
    if total_tokens <= 0 or tokens_per_iter <= 0:
        raise PlanError("token counts must be positive")
    return math.ceil(total_tokens / tokens_per_iter)


def weight_state_bytes(n_params: float, tensor: int, pipeline: int) -> float:
    """Adam-state bytes of one GPU's weight shard (18 B per parameter)."""
    return ADAM_STATE_BYTES_PER_PARAM * n_params / (tensor * pipeline)


def inflight_micro_batches(plan: ParallelPlan) -> int:
    """Peak concurrently-live micro-batches per stage: all of them under
    GPipe, capped at the pipeline depth under 1F1B."""
    n_mb = max(plan.num_micro_batches, 1)
    if plan.schedule is Schedule.ONE_F_ONE_B:
        return min(plan.pipeline, n_mb)
    return n_mb


def memory_per_gpu(model: ModelConfig, plan: ParallelPlan) -> float:
    """Coarse per-GPU memory estimate in bytes: Adam states of the weight
    shard plus in-flight activations.  A feasibility screen, not a truth
    claim."""
    weights = weight_state_bytes(param_count(model), plan.tensor, plan.pipeline)
    layers_per_stage = math.ceil(model.num_layers / plan.pipeline)
    activations = (
        ACTIVATION_BYTES_FACTOR
        * model.seq_len
        * plan.micro_batch
        * model.hidden_size
        * layers_per_stage
        * inflight_micro_batches(plan)
        / plan.tensor
    )
    return weights + activations


def dollar_cost(wall_seconds: float, gpus: int, dollars_per_gpu_hour: float) -> float:
    if wall_seconds < 0 or gpus < 0 or dollars_per_gpu_hour < 0:
        raise PlanError("dollar_cost arguments must be non-negative")
    return wall_seconds / 3600.0 * gpus * dollars_per_gpu_hour
