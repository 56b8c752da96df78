"""Analytic communication volumes: sharded data parallelism versus tensor parallelism.

Volumes are bytes sent per rank.  A ring collective over ``g`` ranks moving a
full tensor of ``B`` bytes sends ``B (g-1)/g`` per rank; an all-reduce sends
twice that.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .config import ModelSpec, ParallelConfig, Topology
from .memory import GRAD_BYTES, OPT_TENSOR_BYTES, PARAM_BYTES

# Activation element size for tensor-parallel collectives (BF16).
ACT_BYTES = 2
# Per layer, sequence-parallel TP runs 4 all-gathers and 4 reduce-scatters;
# the forward half of them is repeated when activations are recomputed.
TP_COLLECTIVES = 8
TP_FORWARD_COLLECTIVES = 4


def _ring(nbytes, g: int) -> Fraction:
    return Fraction(nbytes) * (g - 1) / g


def tp_comm_volume(spec: ModelSpec, tp: int, cp: int = 1, recompute: bool = False) -> float:
    """Bytes per layer per microbatch moved by tensor-parallel activation collectives."""
    if tp < 1 or cp < 1:
        raise ValueError("tp and cp must be >= 1")
    ops = TP_COLLECTIVES + (TP_FORWARD_COLLECTIVES if recompute else 0)
    act = Fraction(spec.seq_len, cp) * spec.micro_batch_size * spec.hidden * ACT_BYTES
    return float(ops * _ring(act, tp))


def stage_layers(spec: ModelSpec, cfg: ParallelConfig) -> int:
    return spec.num_layers // cfg.pp


def hzp_microbatch_volume(spec: ModelSpec, cfg: ParallelConfig) -> float:
    """Per-microbatch gather/scatter bytes of one rank: two parameter
    all-gathers and one gradient reduce-scatter per layer on its stage."""
    P = spec.params_per_layer
    per_layer = 2 * _ring(PARAM_BYTES * P, cfg.z3) + _ring(GRAD_BYTES * P, cfg.z2)
    return float(stage_layers(spec, cfg) * per_layer)


def hzp_comm_volume(
    spec: ModelSpec,
    cfg: ParallelConfig,
    microbatches: int | None = None,
    reuse_savings=None,
) -> float:
    """Bytes per iteration per rank of the sharded workflow.

    ``reuse_savings`` is a pipeline savings report; its eliminated gathers and
    merged scatters are subtracted from the task counts.  No term depends on
    the sequence length.
    """
    m = spec.num_microbatches if microbatches is None else microbatches
    P = spec.params_per_layer
    layers = stage_layers(spec, cfg)
    n_ag = 2 * layers * m
    n_rs = layers * m
    if reuse_savings is not None:
        n_ag -= reuse_savings.total_eliminated_ag
        n_rs -= reuse_savings.total_merged_rs
    replicas = cfg.dp // cfg.z2
    shard_bytes = OPT_TENSOR_BYTES * Fraction(P, cfg.z2)
    total = (
        n_ag * _ring(PARAM_BYTES * P, cfg.z3)
        + n_rs * _ring(GRAD_BYTES * P, cfg.z2)
        + layers * 2 * _ring(shard_bytes, replicas)
        + layers * _ring(PARAM_BYTES * P, cfg.z1)
    )
    return float(total)


def graph_comm_volume(graph, group_sizes: dict[str, int]) -> float:
    """Bytes per rank summed over the communication tasks of a task graph.

    ``group_sizes`` maps each collective kind to the size of the group it
    runs on.
    """
    total = Fraction(0)
    for t in graph:
        if t.is_comm:
            v = _ring(t.bytes, group_sizes[t.kind])
            total += 2 * v if t.kind == "AR-dzp" else v
    return float(total)


@dataclass(frozen=True)
class CpInteraction:
    ranks_per_node: int
    cp: int
    z2: int
    z3: int
    cp_intra_node: bool
    z2_intra_node: bool
    z3_intra_node: bool
    shares_group_with_cp: bool
    tp_cp_conflict: bool
    sharding_only: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _fits_node(g: int, ranks_per_node: int) -> bool:
    return g <= ranks_per_node and ranks_per_node % g == 0


def cp_group_interaction(cfg: ParallelConfig, topo: Topology) -> CpInteraction:
    """Whether sharding and context-parallel groups can each live inside a node.

    A group of size g fits a node when contiguous blocks of g ranks tile the
    node.  Tensor and context parallelism both need intra-node bandwidth, so
    their product exceeding the node size is flagged as a conflict.
    """
    rpn = topo.ranks_per_node
    return CpInteraction(
        ranks_per_node=rpn,
        cp=cfg.cp,
        z2=cfg.z2,
        z3=cfg.z3,
        cp_intra_node=_fits_node(cfg.cp, rpn),
        z2_intra_node=_fits_node(cfg.z2, rpn),
        z3_intra_node=_fits_node(cfg.z3, rpn),
        shares_group_with_cp=cfg.cp > 1 and cfg.z3 == cfg.cp,
        tp_cp_conflict=cfg.tp * cfg.cp > rpn,
        sharding_only=cfg.cp == 1,
    )


SWEEP_COLUMNS = ("seq_len", "tp_bytes", "hzp_bytes")


def sweep_rows(spec: ModelSpec, cfg: ParallelConfig, seq_lens, recompute: bool = False) -> list[dict]:
    """Per-iteration bytes per rank of TP and of the sharded workflow over a seq_len grid.

    The TP column counts every layer on the stage and every microbatch, so
    both columns share a unit.
    """
    from dataclasses import replace

    rows = []
    layers = stage_layers(spec, cfg)
    for s in seq_lens:
        sp = replace(spec, seq_len=int(s))
        tp_bytes = tp_comm_volume(sp, cfg.tp, cfg.cp, recompute) * layers * sp.num_microbatches
        rows.append({"seq_len": int(s), "tp_bytes": tp_bytes, "hzp_bytes": hzp_comm_volume(sp, cfg)})
    return rows
