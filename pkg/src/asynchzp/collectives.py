"""In-process collectives over simulated ranks and a ring alpha-beta cost model.

Every reduction adds contributions in ascending rank order, so two code paths
that reduce the same values in the same grouping produce bit-identical
results.  BF16 is emulated inside float32 storage by rounding the mantissa to
8 bits (round to nearest, ties to even).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import ProcessGroup, Topology

DTYPES = {"bf16": np.float32, "fp32": np.float32, "fp64": np.float64}


class CollectiveError(RuntimeError):
    pass


class ShapeMismatch(CollectiveError):
    pass


class DTypeUnsupported(CollectiveError):
    pass


class RendezvousBroken(CollectiveError):
    pass


def to_bf16(x: np.ndarray) -> np.ndarray:
    """Round float32 values to the nearest BF16 value (ties to even)."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    bits = x.view(np.uint32)
    bias = ((bits >> 16) & 1) + np.uint32(0x7FFF)
    rounded = ((bits + bias) & np.uint32(0xFFFF0000)).astype(np.uint32)
    nan = np.isnan(x)
    if nan.any():
        rounded = np.where(nan, bits | np.uint32(0x00400000), rounded)
    return rounded.view(np.float32)


def is_bf16_exact(x: np.ndarray) -> bool:
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    return bool(np.all((bits & np.uint32(0xFFFF)) == 0))


@dataclass
class RankTensor:
    owner_rank: int
    elems: np.ndarray
    dtype: str = "fp32"
    # None means the tensor is a full (unsharded) copy.
    shard_index: int | None = None

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise DTypeUnsupported(f"unknown dtype {self.dtype!r}")
        self.elems = np.asarray(self.elems, dtype=DTYPES[self.dtype])
        if self.elems.ndim != 1:
            raise ShapeMismatch("rank tensors are flat vectors")

    def __len__(self):
        return self.elems.shape[0]


def _ordered(group: ProcessGroup, tensors: Sequence[RankTensor]) -> list[RankTensor]:
    by_rank = {t.owner_rank: t for t in tensors}
    if len(by_rank) != len(tensors) or set(by_rank) != set(group.ranks):
        raise ShapeMismatch(
            f"{group.kind} group {group.ranks} got tensors from ranks {sorted(by_rank)}"
        )
    return [by_rank[r] for r in group.ranks]


def _common_dtype(tensors: Sequence[RankTensor]) -> str:
    kinds = {t.dtype for t in tensors}
    if len(kinds) != 1:
        raise ShapeMismatch(f"mixed dtypes in one collective: {sorted(kinds)}")
    return kinds.pop()


def _reduce(arrays: list[np.ndarray], order: str) -> np.ndarray:
    if order == "canonical":
        seq = arrays
    elif order == "reversed":
        seq = arrays[::-1]
    else:
        raise ValueError(f"unknown reduction order {order!r}")
    acc = seq[0].copy()
    for a in seq[1:]:
        acc += a
    return acc


def shard(full: RankTensor, group: ProcessGroup) -> list[RankTensor]:
    """Cut a full vector into equal contiguous shards, one per group rank."""
    g = group.size
    if len(full) % g:
        raise ShapeMismatch(f"length {len(full)} not divisible by group size {g}")
    step = len(full) // g
    return [
        RankTensor(r, full.elems[i * step:(i + 1) * step].copy(), full.dtype, i)
        for i, r in enumerate(group.ranks)
    ]


def all_gather(group: ProcessGroup, shards: Sequence[RankTensor]) -> list[RankTensor]:
    ranked = _ordered(group, shards)
    dtype = _common_dtype(ranked)
    if group.size == 1:
        t = ranked[0]
        return [RankTensor(t.owner_rank, t.elems.copy(), dtype, None)]
    order = sorted(ranked, key=lambda t: t.shard_index if t.shard_index is not None else -1)
    if [t.shard_index for t in order] != list(range(group.size)):
        raise ShapeMismatch(f"shard indices {[t.shard_index for t in ranked]} are not a permutation")
    head = {len(t) for t in order[:-1]}
    if len(head) > 1 or (head and len(order[-1]) > head.pop()):
        # Only the trailing shard may be short (padding trimmed).
        raise ShapeMismatch(f"inconsistent shard lengths {[len(t) for t in order]}")
    full = np.concatenate([t.elems for t in order])
    return [RankTensor(r, full.copy(), dtype, None) for r in group.ranks]


def reduce_scatter(
    group: ProcessGroup, fulls: Sequence[RankTensor], order: str = "canonical"
) -> list[RankTensor]:
    ranked = _ordered(group, fulls)
    dtype = _common_dtype(ranked)
    if dtype == "bf16":
        raise DTypeUnsupported("reduce-scatter runs in fp32 or fp64")
    lengths = {len(t) for t in ranked}
    if len(lengths) != 1:
        raise ShapeMismatch(f"inputs differ in length: {sorted(lengths)}")
    n = lengths.pop()
    if n % group.size:
        raise ShapeMismatch(f"length {n} not divisible by group size {group.size}")
    total = _reduce([t.elems for t in ranked], order)
    step = n // group.size
    return [
        RankTensor(r, total[i * step:(i + 1) * step].copy(), dtype, i)
        for i, r in enumerate(group.ranks)
    ]


def all_reduce(
    group: ProcessGroup, tensors: Sequence[RankTensor], order: str = "canonical"
) -> list[RankTensor]:
    ranked = _ordered(group, tensors)
    dtype = _common_dtype(ranked)
    if dtype == "bf16":
        raise DTypeUnsupported("all-reduce runs in fp32 or fp64")
    lengths = {len(t) for t in ranked}
    if len(lengths) != 1:
        raise ShapeMismatch(f"inputs differ in length: {sorted(lengths)}")
    total = _reduce([t.elems for t in ranked], order)
    return [RankTensor(t.owner_rank, total.copy(), dtype, t.shard_index) for t in ranked]


# --------------------------------------------------------------------------
# Rendezvous for per-rank workers
# --------------------------------------------------------------------------

class Rendezvous:
    """Blocking collective endpoint shared by the worker threads of one group.

    Each worker passes its own contribution; the last one to arrive runs the
    functional collective, so the result does not depend on arrival order.
    """

    def __init__(self, group: ProcessGroup, timeout: float = 60.0):
        self.group = group
        self.timeout = timeout
        self._cond = threading.Condition()
        self._inbox: dict[int, RankTensor] = {}
        self._results: dict[int, list[RankTensor]] = {}
        self._unread: dict[int, int] = {}
        self._op: str | None = None
        self._generation = 0
        self._broken: BaseException | None = None

    def abort(self, exc: BaseException | None = None):
        with self._cond:
            self._broken = exc or RendezvousBroken("aborted")
            self._cond.notify_all()

    def _exchange(self, name: str, tensor: RankTensor, fn: Callable) -> RankTensor:
        if self.group.size == 1:
            return fn(self.group, [tensor])[0]
        pos = self.group.index_of(tensor.owner_rank)
        with self._cond:
            if self._broken:
                raise RendezvousBroken(f"{self.group.kind} rendezvous broken") from self._broken
            if self._op is not None and self._op != name:
                exc = CollectiveError(f"rank {tensor.owner_rank} called {name} while group runs {self._op}")
                self._broken = exc
                self._cond.notify_all()
                raise exc
            self._op = name
            gen = self._generation
            if tensor.owner_rank in self._inbox:
                raise CollectiveError(f"rank {tensor.owner_rank} joined {name} twice")
            self._inbox[tensor.owner_rank] = tensor
            if len(self._inbox) == self.group.size:
                try:
                    out = fn(self.group, list(self._inbox.values()))
                except BaseException as exc:
                    self._broken = exc
                    self._cond.notify_all()
                    raise
                self._results[gen] = out
                self._unread[gen] = self.group.size
                self._inbox = {}
                self._op = None
                self._generation += 1
                self._cond.notify_all()
            else:
                ok = self._cond.wait_for(
                    lambda: self._generation != gen or self._broken is not None, self.timeout
                )
                if self._broken is not None and gen not in self._results:
                    raise RendezvousBroken(f"{self.group.kind} rendezvous broken") from self._broken
                if not ok:
                    self._broken = RendezvousBroken(f"{name} timed out on {self.group.ranks}")
                    self._cond.notify_all()
                    raise self._broken
            result = self._results[gen][pos]
            self._unread[gen] -= 1
            if not self._unread[gen]:
                del self._results[gen], self._unread[gen]
            return result

    def all_gather(self, tensor: RankTensor) -> RankTensor:
        return self._exchange("all_gather", tensor, all_gather)

    def reduce_scatter(self, tensor: RankTensor, order: str = "canonical") -> RankTensor:
        return self._exchange("reduce_scatter", tensor, lambda g, ts: reduce_scatter(g, ts, order))

    def all_reduce(self, tensor: RankTensor, order: str = "canonical") -> RankTensor:
        return self._exchange("all_reduce", tensor, lambda g, ts: all_reduce(g, ts, order))


# --------------------------------------------------------------------------
# Cost model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    topo: Topology
    algorithm: str = "ring"

    def __post_init__(self):
        if self.algorithm != "ring":
            raise ValueError(f"unsupported collective algorithm {self.algorithm!r}")

    def link(self, spans_nodes: bool) -> tuple[float, float]:
        if spans_nodes:
            return self.topo.inter_bw, self.topo.inter_latency
        return self.topo.intra_bw, self.topo.intra_latency


def collective_cost(kind: str, group: ProcessGroup, nbytes: float, model: CostModel) -> float:
    """Seconds for one ring collective moving a ``nbytes`` full tensor."""
    if nbytes < 0:
        raise ValueError("payload must be non-negative")
    if kind not in ("AG", "RS", "AR"):
        raise ValueError(f"unknown collective {kind!r}")
    g = group.size
    if g <= 1:
        return 0.0
    bw, lat = model.link(group.spans_nodes)
    one_pass = (g - 1) * (nbytes / g) / bw + (g - 1) * lat
    return 2.0 * one_pass if kind == "AR" else one_pass
