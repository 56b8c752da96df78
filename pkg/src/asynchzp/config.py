"""Model shapes, parallel layout and cluster topology.

Ranks are placed node-major and contiguously: ranks ``0..ranks_per_node-1``
live on node 0 and so on.  Within the rank space the data-parallel index
varies fastest, followed by context-, tensor- and pipeline-parallel indices::

    rank = ((pp_idx * tp + tp_idx) * cp + cp_idx) * dp + dp_idx

so every sharding group (a run of ``z`` consecutive data-parallel indices) is
a contiguous rank range.

Sharding group sizes follow the memory formula: ``z1`` shards the three FP32
optimizer tensors, ``z2`` the FP32 gradients and ``z3`` the BF16 parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

GROUP_KINDS = ("Z1", "Z2", "Z3", "DZP-replica", "PP", "CP", "TP")


class ConfigError(ValueError):
    """Raised for configurations that cannot be simulated."""


class NonDivisible(ConfigError):
    pass


class EmptyModel(ConfigError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    params_per_layer: int
    embedding_params: int = 0
    seq_len: int = 4096
    micro_batch_size: int = 1
    num_microbatches: int = 1
    flops_per_token_per_layer: float = 0.0
    # Optional transformer width.  When absent it is derived from
    # params_per_layer ~= 12 * hidden**2.
    hidden_size: int | None = None

    @property
    def total_params(self) -> int:
        return self.num_layers * self.params_per_layer + self.embedding_params

    @property
    def hidden(self) -> int:
        if self.hidden_size is not None:
            return self.hidden_size
        return max(1, math.isqrt(self.params_per_layer // 12))


@dataclass(frozen=True)
class ParallelConfig:
    dp: int
    z1: int
    z2: int
    z3: int
    pp: int = 1
    vpp: int = 1
    cp: int = 1
    tp: int = 1

    @property
    def world_size(self) -> int:
        return self.dp * self.pp * self.cp * self.tp

    def replace(self, **changes) -> ParallelConfig:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ParallelConfig(**values)


@dataclass(frozen=True)
class Topology:
    num_nodes: int
    ranks_per_node: int
    intra_bw: float
    inter_bw: float
    intra_latency: float = 0.0
    inter_latency: float = 0.0
    # Per-rank dense throughput used to turn FLOPs into seconds.
    peak_flops: float = 300e12

    @property
    def total_ranks(self) -> int:
        return self.num_nodes * self.ranks_per_node

    def node_of(self, rank: int) -> int:
        return rank // self.ranks_per_node


@dataclass(frozen=True)
class ProcessGroup:
    kind: str
    ranks: tuple[int, ...]
    spans_nodes: bool = False

    @property
    def size(self) -> int:
        return len(self.ranks)

    def index_of(self, rank: int) -> int:
        return self.ranks.index(rank)


@dataclass(frozen=True)
class ValidatedConfig:
    spec: ModelSpec
    cfg: ParallelConfig
    topo: Topology
    total_params: int
    total_ranks: int
    group_counts: dict[str, int] = field(default_factory=dict)


def validate_config(spec: ModelSpec, cfg: ParallelConfig, topo: Topology) -> ValidatedConfig:
    if spec.total_params <= 0 or spec.num_layers < 0 or spec.params_per_layer < 0:
        raise EmptyModel(f"model {spec.name!r} has no parameters")
    if spec.num_microbatches < 1:
        raise ConfigError("num_microbatches must be >= 1")
    if spec.seq_len < 1 or spec.micro_batch_size < 1:
        raise ConfigError("seq_len and micro_batch_size must be >= 1")

    for name in ("dp", "z1", "z2", "z3", "pp", "vpp", "cp", "tp"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    for name in ("z1", "z2", "z3"):
        z = getattr(cfg, name)
        if cfg.dp % z:
            raise NonDivisible(f"{name}={z} does not divide dp={cfg.dp}")
    if cfg.vpp > 1 and cfg.pp == 1:
        raise ConfigError("vpp > 1 requires pp > 1")

    if topo.num_nodes < 1 or topo.ranks_per_node < 1:
        raise ConfigError("topology needs at least one node and one rank per node")
    if not (topo.intra_bw >= topo.inter_bw > 0):
        raise ConfigError("bandwidths must satisfy intra_bw >= inter_bw > 0")
    if topo.intra_latency < 0 or topo.inter_latency < 0:
        raise ConfigError("latencies must be non-negative")
    if cfg.world_size != topo.total_ranks:
        raise NonDivisible(
            f"dp*pp*cp*tp = {cfg.world_size} does not match "
            f"{topo.num_nodes}x{topo.ranks_per_node} = {topo.total_ranks} ranks"
        )

    slices = cfg.pp * cfg.cp * cfg.tp
    counts = {
        "Z1": slices * cfg.dp // cfg.z1,
        "Z2": slices * cfg.dp // cfg.z2,
        "Z3": slices * cfg.dp // cfg.z3,
        "DZP-replica": slices * cfg.z2,
        "PP": cfg.world_size // cfg.pp,
        "CP": cfg.world_size // cfg.cp,
        "TP": cfg.world_size // cfg.tp,
    }
    return ValidatedConfig(spec, cfg, topo, spec.total_params, topo.total_ranks, counts)


def rank_of(cfg: ParallelConfig, dp_idx: int, cp_idx: int = 0, tp_idx: int = 0, pp_idx: int = 0) -> int:
    return ((pp_idx * cfg.tp + tp_idx) * cfg.cp + cp_idx) * cfg.dp + dp_idx


def coords_of(cfg: ParallelConfig, rank: int) -> tuple[int, int, int, int]:
    """Inverse of :func:`rank_of`; returns ``(dp_idx, cp_idx, tp_idx, pp_idx)``."""
    dp_idx = rank % cfg.dp
    rest = rank // cfg.dp
    cp_idx = rest % cfg.cp
    rest //= cfg.cp
    return dp_idx, cp_idx, rest % cfg.tp, rest // cfg.tp


def _group(kind: str, ranks: list[int], topo: Topology) -> ProcessGroup:
    nodes = {topo.node_of(r) for r in ranks}
    return ProcessGroup(kind, tuple(ranks), len(nodes) > 1)


def build_process_groups(cfg: ParallelConfig, topo: Topology) -> dict[str, list[ProcessGroup]]:
    groups: dict[str, list[ProcessGroup]] = {k: [] for k in GROUP_KINDS}
    for pp_idx in range(cfg.pp):
        for tp_idx in range(cfg.tp):
            for cp_idx in range(cfg.cp):
                base = rank_of(cfg, 0, cp_idx, tp_idx, pp_idx)
                for kind, z in (("Z1", cfg.z1), ("Z2", cfg.z2), ("Z3", cfg.z3)):
                    for start in range(0, cfg.dp, z):
                        groups[kind].append(_group(kind, list(range(base + start, base + start + z)), topo))
                for shard in range(cfg.z2):
                    ranks = [base + d for d in range(shard, cfg.dp, cfg.z2)]
                    groups["DZP-replica"].append(_group("DZP-replica", ranks, topo))

    for rank in range(cfg.world_size):
        dp_idx, cp_idx, tp_idx, pp_idx = coords_of(cfg, rank)
        if pp_idx == 0:
            ranks = [rank_of(cfg, dp_idx, cp_idx, tp_idx, p) for p in range(cfg.pp)]
            groups["PP"].append(_group("PP", ranks, topo))
        if cp_idx == 0:
            ranks = [rank_of(cfg, dp_idx, c, tp_idx, pp_idx) for c in range(cfg.cp)]
            groups["CP"].append(_group("CP", ranks, topo))
        if tp_idx == 0:
            ranks = [rank_of(cfg, dp_idx, cp_idx, t, pp_idx) for t in range(cfg.tp)]
            groups["TP"].append(_group("TP", ranks, topo))
    return groups


def group_containing(groups: dict[str, list[ProcessGroup]], kind: str, rank: int) -> ProcessGroup:
    for group in groups[kind]:
        if rank in group.ranks:
            return group
    raise KeyError(f"rank {rank} has no {kind} group")


def groups_for_rank(cfg: ParallelConfig, topo: Topology, rank: int = 0) -> dict[str, ProcessGroup]:
    """The group of each kind that ``rank`` belongs to, without building every group."""
    dp_idx, cp_idx, tp_idx, pp_idx = coords_of(cfg, rank)
    base = rank_of(cfg, 0, cp_idx, tp_idx, pp_idx)
    out = {}
    for kind, z in (("Z1", cfg.z1), ("Z2", cfg.z2), ("Z3", cfg.z3)):
        start = base + (dp_idx // z) * z
        out[kind] = _group(kind, list(range(start, start + z)), topo)
    out["DZP-replica"] = _group("DZP-replica", [base + d for d in range(dp_idx % cfg.z2, cfg.dp, cfg.z2)], topo)
    out["PP"] = _group("PP", [rank_of(cfg, dp_idx, cp_idx, tp_idx, p) for p in range(cfg.pp)], topo)
    out["CP"] = _group("CP", [rank_of(cfg, dp_idx, c, tp_idx, pp_idx) for c in range(cfg.cp)], topo)
    out["TP"] = _group("TP", [rank_of(cfg, dp_idx, cp_idx, t, pp_idx) for t in range(cfg.tp)], topo)
    return out


# --------------------------------------------------------------------------
# Config files
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    spec: ModelSpec
    cfg: ParallelConfig
    topo: Topology
    extras: dict[str, Any] = field(default_factory=dict)


def _build(cls, section: dict[str, Any], name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(data: dict[str, Any]) -> RunConfig:
    for section in ("model", "parallel", "topology"):
        if not isinstance(data.get(section), dict):
            raise ConfigError(f"missing [{section}] section")
    spec = _build(ModelSpec, data["model"], "model")
    cfg = _build(ParallelConfig, data["parallel"], "parallel")
    topo = _build(Topology, data["topology"], "topology")
    for obj in (spec, cfg, topo):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if f.name in ("name", "hidden_size") or value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{f.name} must be numeric, got {value!r}")
    validate_config(spec, cfg, topo)
    extras = {k: v for k, v in data.items() if k not in ("model", "parallel", "topology")}
    return RunConfig(spec, cfg, topo, extras)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return parse_config(data)
