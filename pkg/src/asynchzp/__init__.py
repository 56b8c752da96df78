"""Hierarchical ZeRO sharding: memory model, collectives, schedule simulator and a
numerically checked sharded trainer."""

from .collectives import CostModel, RankTensor, all_gather, all_reduce, collective_cost, reduce_scatter
from .compare import cp_group_interaction, hzp_comm_volume, tp_comm_volume
from .config import (
    ConfigError,
    ModelSpec,
    ParallelConfig,
    ProcessGroup,
    Topology,
    build_process_groups,
    load_config,
    validate_config,
)
from .memory import MemoryLedger, ledger, mem_hzp, mem_zero3, mem_zp, plan_search
from .pipeline import apply_reuse, build_schedule, recompute_rule
from .sched import GraphPolicy, build_task_graph, memory_trace, simulate, utilization_report
from .train import TinyModel, verify_equivalence

__version__ = "0.1.0"
