"""Profiling-table-driven simulator for transformer LLM training under
(t, d, p)-way 3D parallelism: single-iteration timing, end-to-end cost,
design-space exploration, and multi-tenant cluster scheduling."""

from .core import (
    HardwareSpec,
    ModelConfig,
    ParallelPlan,
    Schedule,
    TrainingRun,
    dollar_cost,
    flops_per_iteration,
    iterations_for_tokens,
    memory_per_gpu,
    param_count,
    tokens_per_iteration,
)
from .costdb import (
    CollectiveTable,
    CostDatabase,
    KernelEntry,
    OperatorSignature,
    OpKind,
    allreduce_time,
    comm_time,
    database_from_files,
    load_profile,
    op_flops,
    save_profile,
)
from .engine import SimResult, brute_force_makespan, end_to_end, simulate_iteration
from .opgraph import (
    OperatorGraph,
    OperatorNode,
    TaskGraph,
    add_schedule_edges,
    build_operator_graph,
    build_stage_task_graph,
    lower_to_tasks,
    validate_graph,
)

__version__ = "0.1.0"
