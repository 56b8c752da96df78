"""Static memory of mixed-precision Adam training under (hierarchical) ZeRO.

Per parameter the model states cost 2 bytes of BF16 weights, 4 bytes of FP32
gradients and 3 x 4 bytes of FP32 optimizer state (master replica, momentum,
variance).  Each state is sharded over its own group; a shard is rounded up
to whole elements, so every function here returns exact integer bytes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .config import ModelSpec, ParallelConfig, Topology, validate_config

PARAM_BYTES = 2
GRAD_BYTES = 4
OPT_TENSOR_BYTES = 4
OPT_TENSORS = 3
BYTES_PER_PARAM = PARAM_BYTES + GRAD_BYTES + OPT_TENSORS * OPT_TENSOR_BYTES  # 18


class ReplicaExceedsWorld(ValueError):
    pass


class NoFeasibleConfig(RuntimeError):
    pass


def _shard(n: int, z: int) -> int:
    return -(-n // z)


def mem_zero3(n: int, dp: int) -> int:
    """Bytes per rank when every state is sharded over the whole DP group."""
    return mem_hzp(n, dp, dp, dp)


def mem_zp(n: int, z: int, dp: int) -> int:
    """ZeRO-3 restricted to replicas of size ``z`` inside a DP group of ``dp``."""
    if z > dp:
        raise ReplicaExceedsWorld(f"sharding group {z} larger than dp={dp}")
    return mem_hzp(n, z, z, z)


def mem_hzp(n: int, z1: int, z2: int, z3: int) -> int:
    """12N/z1 + 4N/z2 + 2N/z3 with per-state shard rounding."""
    if min(z1, z2, z3) < 1:
        raise ValueError("group sizes must be >= 1")
    return (
        OPT_TENSORS * OPT_TENSOR_BYTES * _shard(n, z1)
        + GRAD_BYTES * _shard(n, z2)
        + PARAM_BYTES * _shard(n, z3)
    )


@dataclass(frozen=True)
class MemoryLedger:
    params_bf16: int
    grads_fp32: int
    replica_fp32: int
    momentum_fp32: int
    variance_fp32: int

    @property
    def optimizer_fp32(self) -> int:
        return self.replica_fp32 + self.momentum_fp32 + self.variance_fp32

    @property
    def total_static(self) -> int:
        return self.params_bf16 + self.grads_fp32 + self.optimizer_fp32


def stage_params(spec: ModelSpec, cfg: ParallelConfig) -> int:
    """Parameters resident on one pipeline stage."""
    return _shard(spec.total_params, cfg.pp)


def ledger(spec: ModelSpec, cfg: ParallelConfig) -> MemoryLedger:
    n = stage_params(spec, cfg)
    opt = OPT_TENSOR_BYTES * _shard(n, cfg.z1)
    return MemoryLedger(
        params_bf16=PARAM_BYTES * _shard(n, cfg.z3),
        grads_fp32=GRAD_BYTES * _shard(n, cfg.z2),
        replica_fp32=opt,
        momentum_fp32=opt,
        variance_fp32=opt,
    )


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def count_spanning(cfg: ParallelConfig, topo: Topology, z: int) -> int:
    """Number of size-``z`` sharding groups whose ranks touch more than one node."""
    count = 0
    for s in range(cfg.pp * cfg.tp * cfg.cp):
        base = s * cfg.dp
        for start in range(base, base + cfg.dp, z):
            if topo.node_of(start) != topo.node_of(start + z - 1):
                count += 1
    return count


@dataclass(frozen=True)
class PlanRow:
    cfg: ParallelConfig
    static_bytes: int
    spans_nodes_z2: int
    spans_nodes_z3: int
    comm_cost_estimate: float

    def sort_key(self):
        c = self.cfg
        return (
            self.spans_nodes_z2 + self.spans_nodes_z3,
            self.comm_cost_estimate,
            self.static_bytes,
            c.z1,
            c.z2,
            c.z3,
        )

    def as_csv_row(self) -> dict:
        c = self.cfg
        return {
            "z1": c.z1,
            "z2": c.z2,
            "z3": c.z3,
            "pp": c.pp,
            "cp": c.cp,
            "static_bytes": self.static_bytes,
            "spans_nodes_z2": self.spans_nodes_z2,
            "spans_nodes_z3": self.spans_nodes_z3,
            "comm_cost_estimate": self.comm_cost_estimate,
        }


PLAN_COLUMNS = (
    "z1", "z2", "z3", "pp", "cp", "static_bytes",
    "spans_nodes_z2", "spans_nodes_z3", "comm_cost_estimate",
)


def plan_candidates(spec: ModelSpec, topo: Topology, base: ParallelConfig) -> list[PlanRow]:
    from .compare import hzp_microbatch_volume

    rows = []
    divs = divisors(base.dp)
    span = {z: count_spanning(base, topo, z) for z in divs}
    for z1, z2, z3 in itertools.product(divs, repeat=3):
        cfg = base.replace(z1=z1, z2=z2, z3=z3)
        rows.append(
            PlanRow(
                cfg=cfg,
                static_bytes=ledger(spec, cfg).total_static,
                spans_nodes_z2=span[z2],
                spans_nodes_z3=span[z3],
                comm_cost_estimate=hzp_microbatch_volume(spec, cfg),
            )
        )
    return rows


def plan_search(
    spec: ModelSpec,
    topo: Topology,
    budget: int,
    activation_estimate: int = 0,
    base: ParallelConfig | None = None,
) -> list[PlanRow]:
    """Feasible (z1, z2, z3) choices for ``base``'s layout, best first.

    Rows are ordered by the number of node-spanning Z2 and Z3 groups, then by
    per-microbatch gather/scatter volume, then by static memory.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if base is None:
        base = ParallelConfig(dp=topo.total_ranks, z1=1, z2=1, z3=1)
    validate_config(spec, base, topo)
    rows = [
        r for r in plan_candidates(spec, topo, base)
        if r.static_bytes + activation_estimate <= budget
    ]
    if not rows:
        floor = ledger(spec, base.replace(z1=base.dp, z2=base.dp, z3=base.dp)).total_static
        raise NoFeasibleConfig(
            f"no sharding fits {budget} bytes; minimum static memory is {floor} "
            f"+ {activation_estimate} activations"
        )
    return sorted(rows, key=PlanRow.sort_key)

