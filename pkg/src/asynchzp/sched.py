"""Task-graph construction and discrete-event simulation of one pipeline rank.

The simulator computes earliest start times over a constraint DAG.  A task
starts once every constraint predecessor has ended:

* data dependencies of the task graph;
* stream order (a stream runs one task at a time, in issue order);
* buffer-pool ring order (the k-th acquirer of a pool with S slots waits for
  the (k-S)-th acquirer to release its slot);
* in vanilla mode, synchronisation edges at each collective's issue point.

Async mode uses three streams (compute, ag, rs) and issues every collective
as soon as its inputs and a pool slot are available.  Vanilla mode funnels all
collectives through one communication stream.  Each collective is issued in
program order (a parameter gather one compute task ahead of its consumer), it
cannot start before the compute task issued just before it has finished, and
the compute task issued after it waits for the communication stream to drain
up to that collective.  Vanilla therefore only ever adds constraints, so its
compute idle time can never be lower than async's.
"""

from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from .collectives import CostModel, collective_cost
from .config import ModelSpec, ParallelConfig, groups_for_rank, rank_of, validate_config
from .memory import GRAD_BYTES, PARAM_BYTES, MemoryLedger
from .pipeline import apply_reuse, build_schedule, recompute_rule
from .taskgraph import (
    AG_KINDS,
    AG_PARAM,
    AG_POST,
    AR_DZP,
    BWD,
    COMPUTE_KINDS,
    FWD,
    OPT_STEP,
    RS_GRAD,
    Task,
    TaskGraph,
    stream_role,
)

MODES = ("vanilla", "async")


class InvalidPolicy(ValueError):
    pass


class DeadlockDetected(RuntimeError):
    pass


class PoolViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class GraphPolicy:
    variant: str = "1f1b"
    pipeline_rank: int = 0
    reuse: bool = False
    recompute: bool = False
    # Hold every reduce-scatter of a backward pass until its last layer is done.
    defer_rs: bool = False
    opt_step_seconds: float = 0.0


@dataclass(frozen=True)
class StreamSet:
    compute: str = "compute"
    ag: str = "ag"
    rs: str = "rs"


# --------------------------------------------------------------------------
# Graph construction
# --------------------------------------------------------------------------

def _compute_seconds(spec: ModelSpec, cfg: ParallelConfig, peak_flops: float) -> float:
    tokens = spec.seq_len * spec.micro_batch_size / cfg.cp
    return spec.flops_per_token_per_layer * tokens / peak_flops


def build_task_graph(
    spec: ModelSpec, cfg: ParallelConfig, cost: CostModel, policy: GraphPolicy = GraphPolicy()
) -> TaskGraph:
    topo = cost.topo
    validate_config(spec, cfg, topo)
    if cfg.tp != 1:
        raise InvalidPolicy("sharded execution paths require tp=1")
    if not 0 <= policy.pipeline_rank < cfg.pp:
        raise InvalidPolicy(f"pipeline rank {policy.pipeline_rank} outside 0..{cfg.pp - 1}")
    if spec.num_layers % (cfg.pp * cfg.vpp):
        raise InvalidPolicy(f"{spec.num_layers} layers do not split into {cfg.pp}x{cfg.vpp} chunks")
    if policy.defer_rs and policy.reuse:
        raise InvalidPolicy("deferred reduce-scatter cannot be combined with reuse")
    if policy.variant == "1f1b" and cfg.vpp > 1:
        policy = replace(policy, variant="interleaved")

    schedule = build_schedule(cfg.pp, cfg.vpp, spec.num_microbatches, policy.variant)
    entries = schedule.for_rank(policy.pipeline_rank)
    groups = groups_for_rank(cfg, topo, rank_of(cfg, 0, pp_idx=policy.pipeline_rank))

    P = spec.params_per_layer
    chunk = spec.num_layers // (cfg.pp * cfg.vpp)
    fwd_s = _compute_seconds(spec, cfg, topo.peak_flops)
    bwd_s = 2.0 * fwd_s
    ag_bytes, rs_bytes = PARAM_BYTES * P, GRAD_BYTES * P
    ag_s = collective_cost("AG", groups["Z3"], ag_bytes, cost)
    rs_s = collective_cost("RS", groups["Z2"], rs_bytes, cost)
    dzp = groups["DZP-replica"]
    ar_bytes = -(-rs_bytes // cfg.z2)
    ar_s = collective_cost("AR", dzp, ar_bytes, cost)
    post_s = collective_cost("AG", groups["Z1"], ag_bytes, cost)

    tasks: list[Task] = []

    def add(**kw) -> int:
        tid = len(tasks)
        tasks.append(Task(id=tid, **kw))
        return tid

    fwd_id: dict[tuple[int, int, int], int] = {}  # (layer, mb, vstage) -> FWD
    chunk_first_bwd: dict[tuple[int, int], int] = {}
    chunk_last_fwd: dict[tuple[int, int], int] = {}

    for e, ent in enumerate(entries):
        layers = range(ent.vstage * chunk, (ent.vstage + 1) * chunk)
        mb, v = ent.microbatch, ent.vstage
        if ent.pass_name == "F":
            prev = chunk_last_fwd.get((mb, v - 1))
            for layer in layers:
                ag = add(kind=AG_PARAM, layer=layer, microbatch=mb, pass_name="forward",
                         duration=ag_s, bytes=ag_bytes, entry=e, vstage=v)
                deps = (ag,) + ((prev,) if prev is not None else ())
                prev = add(kind=FWD, layer=layer, microbatch=mb, pass_name="forward",
                           duration=fwd_s, deps=deps, entry=e, vstage=v)
                fwd_id[(layer, mb, v)] = prev
            chunk_last_fwd[(mb, v)] = prev
        else:
            prev = chunk_first_bwd.get((mb, v + 1))
            pending_rs = []
            for layer in reversed(layers):
                ag = add(kind=AG_PARAM, layer=layer, microbatch=mb, pass_name="backward",
                         duration=ag_s, bytes=ag_bytes, entry=e, vstage=v)
                deps = [ag, fwd_id[(layer, mb, v)]]
                if prev is not None:
                    deps.append(prev)
                prev = add(kind=BWD, layer=layer, microbatch=mb, pass_name="backward",
                           duration=bwd_s, deps=tuple(sorted(deps)), entry=e, vstage=v)
                if policy.defer_rs:
                    pending_rs.append((layer, prev))
                else:
                    add(kind=RS_GRAD, layer=layer, microbatch=mb, pass_name="backward",
                        duration=rs_s, bytes=rs_bytes, deps=(prev,), entry=e, vstage=v)
            for layer, b in pending_rs:
                deps = tuple(sorted({b, prev}))
                add(kind=RS_GRAD, layer=layer, microbatch=mb, pass_name="backward",
                    duration=rs_s, bytes=rs_bytes, deps=deps, entry=e, vstage=v)
            chunk_first_bwd[(mb, v)] = prev

    meta = {
        "pipeline_rank": policy.pipeline_rank,
        "entries": entries,
        "schedule": schedule,
        "layers": chunk * cfg.vpp,
        "chunk_layers": chunk,
        "microbatches": spec.num_microbatches,
        "layer_param_bytes": ag_bytes,
        "layer_grad_bytes": rs_bytes,
        "fwd_seconds": fwd_s,
        "tokens": spec.seq_len * spec.micro_batch_size / cfg.cp,
        "defer_rs": policy.defer_rs,
        "pp": cfg.pp,
        "vpp": cfg.vpp,
        "collective_model": cost.algorithm,
    }
    graph = TaskGraph(tasks, meta)
    if policy.reuse:
        graph, _ = apply_reuse(schedule, graph)
    graph = recompute_rule(graph, policy.recompute)
    return _append_step(graph, cfg, dzp.size, ar_s, ar_bytes, post_s, ag_bytes, policy.opt_step_seconds)


def _append_step(graph, cfg, replicas, ar_s, ar_bytes, post_s, ag_bytes, opt_s) -> TaskGraph:
    tasks = list(graph.tasks)
    rs_by_layer: dict[int, list[int]] = defaultdict(list)
    for t in tasks:
        if t.kind == RS_GRAD:
            rs_by_layer[t.layer].append(t.id)
    layers = sorted(rs_by_layer)
    opt_deps = []
    for layer in layers:
        if replicas > 1:
            tid = len(tasks)
            tasks.append(Task(tid, AR_DZP, layer=layer, duration=ar_s, bytes=ar_bytes,
                              deps=tuple(rs_by_layer[layer])))
            opt_deps.append(tid)
        else:
            opt_deps.extend(rs_by_layer[layer])
    opt = len(tasks)
    tasks.append(Task(opt, OPT_STEP, duration=opt_s, deps=tuple(sorted(opt_deps))))
    for layer in layers:
        tasks.append(Task(len(tasks), AG_POST, layer=layer, duration=post_s, bytes=ag_bytes, deps=(opt,)))
    return TaskGraph(tasks, graph.meta)


# --------------------------------------------------------------------------
# Pools
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BufferPool:
    """Fixed ring of equal slots, allocated once and reused cyclically."""

    kind: str  # AG-pool | RS-pool
    slot_bytes: int
    slot_count: int

    def __post_init__(self):
        if self.slot_count < 1:
            raise ValueError("a pool needs at least one slot")

    @property
    def capacity(self) -> int:
        return self.slot_bytes * self.slot_count

    def replay(self, holds: list[tuple[float, float]]) -> int:
        """Check a sequence of (acquire, release) holds against the ring.

        Holds are given in acquisition order; hold k uses slot k mod S and may
        only start once the previous occupant of that slot has been released.
        Returns the maximum number of simultaneously live slots.
        """
        owner_release = [float("-inf")] * self.slot_count
        for k, (acq, rel) in enumerate(holds):
            if rel < acq:
                raise PoolViolation(f"hold {k} releases before it acquires")
            slot = k % self.slot_count
            if acq < owner_release[slot]:
                raise PoolViolation(f"hold {k} reuses slot {slot} before its release")
            owner_release[slot] = rel
        return max_live(holds)


def max_live(holds) -> int:
    events = sorted([(r, -1) for _, r in holds] + [(a, 1) for a, _ in holds])
    live = best = 0
    for _, d in events:
        live += d
        best = max(best, live)
    return best


def prelaunch_depth(free_budget: float, layer_param_bytes: int, layers: int) -> int:
    """Parameter gathers that may be in flight, from the memory left over."""
    if layer_param_bytes <= 0:
        return max(1, layers)
    return max(1, min(layers, int(free_budget // layer_param_bytes)))


def default_pools(graph: TaskGraph, ag_slots: int | None = None, rs_slots: int | None = None):
    layers = graph.meta.get("layers", 1)
    chunk = graph.meta.get("chunk_layers", layers)
    if ag_slots is None:
        ag_slots = min(2, layers)
    if rs_slots is None:
        rs_slots = chunk if graph.meta.get("defer_rs") else max(1, min(2, chunk - 1))
    return (
        BufferPool("AG-pool", graph.meta.get("layer_param_bytes", 0), ag_slots),
        BufferPool("RS-pool", graph.meta.get("layer_grad_bytes", 0), rs_slots),
    )


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------

@dataclass
class Timeline:
    mode: str
    streams: dict[str, list[tuple[int, float, float]]]
    start: list[float]
    end: list[float]
    makespan: float
    compute_busy: float
    # (kind, acquire, release, bytes) for every transient buffer.
    buffers: list[tuple[str, float, float, int]]
    pool_max_live: dict[str, int]
    pool_reserved: dict[str, int]
    meta: dict = field(default_factory=dict)

    @property
    def compute_idle(self) -> float:
        return self.makespan - self.compute_busy

    def memory_series(self, kinds=None) -> list[tuple[float, int]]:
        """Live transient bytes after each change point, optionally per kind."""
        deltas: dict[float, int] = defaultdict(int)
        for kind, acq, rel, nbytes in self.buffers:
            if kinds is not None and kind not in kinds:
                continue
            if rel > acq:
                deltas[acq] += nbytes
                deltas[rel] -= nbytes
        out, live = [(0.0, 0)], 0
        for t in sorted(deltas):
            live += deltas[t]
            out.append((t, live))
        return out

    @property
    def memory_samples(self) -> list[tuple[float, int]]:
        return self.memory_series()

    def peak_of(self, *kinds: str) -> int:
        return max(b for _, b in self.memory_series(set(kinds) if kinds else None))

    @property
    def peak_memory(self) -> int:
        return self.peak_of()


BUFFER_KINDS = ("ag_pool", "param_cache", "rs_pool", "grad_accum")


class _Plan(NamedTuple):
    preds: list[set[int]]
    stream_of: list[str]
    stream_order: dict[str, list[int]]
    ag_holds: list[tuple[int, int]]  # (acquirer, releaser)
    rs_holds: list[tuple[int, int]]
    caches: list[tuple[int, int, int]]  # (ag task, ring releaser, last consumer)
    accums: list[tuple[int, int]]  # (first bwd, rs)


def _issue_order(graph: TaskGraph, consumers) -> list[int]:
    """Vanilla issue sequence: program order with each parameter gather issued
    just before the compute task that precedes its first consumer."""
    prev_compute = {}
    last = None
    for t in graph:
        if t.kind in COMPUTE_KINDS:
            prev_compute[t.id] = last
            last = t.id
    hoisted: dict[int, list[int]] = defaultdict(list)
    for t in graph:
        if t.kind == AG_PARAM and consumers[t.id]:
            anchor = prev_compute[min(consumers[t.id])]
            if anchor is not None and anchor < t.id:
                hoisted[anchor].append(t.id)
    moved = {tid for ids in hoisted.values() for tid in ids}
    order = []
    for t in graph:
        if t.id in moved:
            continue
        order.extend(hoisted.get(t.id, ()))
        order.append(t.id)
    return order


def _plan(graph: TaskGraph, mode: str, pools: tuple[BufferPool, BufferPool]) -> _Plan:
    n = len(graph)
    consumers = graph.consumers()
    preds: list[set[int]] = [set(t.deps) for t in graph]

    # Streams.
    if mode == "async":
        stream_of = [stream_role(t.kind) for t in graph]
        order = list(range(n))
    else:
        stream_of = ["compute" if t.kind in COMPUTE_KINDS else "comm" for t in graph]
        order = _issue_order(graph, consumers)
    stream_order: dict[str, list[int]] = defaultdict(list)
    for tid in order:
        stream_order[stream_of[tid]].append(tid)
    for seq in stream_order.values():
        for a, b in zip(seq, seq[1:]):
            preds[b].add(a)

    if mode == "vanilla":
        comm_prev = {}
        seq = stream_order.get("comm", [])
        for a, b in zip(seq, seq[1:]):
            comm_prev[b] = a
        last_compute = None
        since: list[int] = []
        for tid in order:
            if stream_of[tid] == "compute":
                for c in since:
                    if c in comm_prev:
                        preds[tid].add(comm_prev[c])
                since = []
                last_compute = tid
            else:
                if last_compute is not None:
                    preds[tid].add(last_compute)
                since.append(tid)

    # AG ring: parameter gathers and post-step gathers.
    ag_holds, caches = [], []
    for t in graph:
        if t.kind not in AG_KINDS:
            continue
        users = consumers[t.id]
        local = [u for u in users if graph[u].entry == t.entry]
        releaser = max(local) if local else t.id
        ag_holds.append((t.id, releaser))
        if users and max(users) != releaser:
            caches.append((t.id, releaser, max(users)))

    # RS ring: a backward task holds a full gradient buffer until its own
    # reduce-scatter ends.  Accumulated runs use a separate buffer.
    rs_holds, accums = [], []
    for t in graph:
        if t.kind != RS_GRAD:
            continue
        own = [d for d in t.deps if graph[d].kind == BWD and graph[d].layer == t.layer]
        if len(own) == 1:
            rs_holds.append((own[0], t.id))
        elif own:
            accums.append((min(own), t.id))
    rs_holds.sort()

    for holds, pool in ((ag_holds, pools[0]), (rs_holds, pools[1])):
        s = pool.slot_count
        for k in range(s, len(holds)):
            preds[holds[k][0]].add(holds[k - s][1])
    return _Plan(preds, stream_of, dict(stream_order), ag_holds, rs_holds, caches, accums)


def simulate(
    graph: TaskGraph,
    mode: str = "async",
    pools: tuple[BufferPool, BufferPool] | None = None,
    streams: StreamSet = StreamSet(),
    launch_latency: float = 0.0,
) -> Timeline:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if pools is None:
        pools = default_pools(graph)
    plan = _plan(graph, mode, pools)
    n = len(graph)
    dur = [t.duration + (launch_latency if t.is_comm else 0.0) for t in graph]

    succ: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for v, ps in enumerate(plan.preds):
        for u in ps:
            succ[u].append(v)
        indeg[v] = len(ps)
    start = [0.0] * n
    end = [0.0] * n
    ready = [v for v in range(n) if indeg[v] == 0]
    heapq.heapify(ready)
    done = 0
    while ready:
        v = heapq.heappop(ready)
        start[v] = max((end[u] for u in plan.preds[v]), default=0.0)
        end[v] = start[v] + dur[v]
        done += 1
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(ready, w)
    if done != n:
        stuck = sorted(v for v in range(n) if indeg[v] > 0)[:5]
        raise DeadlockDetected(
            "pool exhaustion and dependencies form a cycle; blocked tasks include "
            + ", ".join(graph[v].label for v in stuck)
        )

    names = {"compute": streams.compute, "ag": streams.ag, "rs": streams.rs, "comm": "comm"}
    out_streams = {
        names[s]: [(tid, start[tid], end[tid]) for tid in seq] for s, seq in plan.stream_order.items()
    }

    def acquire(tid: int, releaser_pred: int | None) -> float:
        t = graph[tid]
        times = [end[d] for d in t.deps]
        if releaser_pred is not None:
            times.append(end[releaser_pred])
        return max(times, default=0.0)

    pbytes = graph.meta.get("layer_param_bytes", pools[0].slot_bytes)
    gbytes = graph.meta.get("layer_grad_bytes", pools[1].slot_bytes)
    buffers = []
    s = pools[0].slot_count
    for k, (acq, rel) in enumerate(plan.ag_holds):
        ring_pred = plan.ag_holds[k - s][1] if k >= s else None
        buffers.append(("ag_pool", min(acquire(acq, ring_pred), start[acq]), end[rel], pbytes))
    for ag, rel, last in plan.caches:
        buffers.append(("param_cache", end[rel], end[last], pbytes))
    for bwd, rs in plan.rs_holds:
        buffers.append(("rs_pool", start[bwd], end[rs], gbytes))
    for first, rs in plan.accums:
        buffers.append(("grad_accum", start[first], end[rs], gbytes))

    ag_live = pools[0].replay([(a, r) for kind, a, r, _ in buffers if kind == "ag_pool"])
    rs_live = pools[1].replay([(a, r) for kind, a, r, _ in buffers if kind == "rs_pool"])
    busy = 0.0
    for t in graph:
        if t.kind in COMPUTE_KINDS:
            busy += t.duration
    return Timeline(
        mode=mode,
        streams=out_streams,
        start=start,
        end=end,
        makespan=max(end, default=0.0),
        compute_busy=busy,
        buffers=buffers,
        pool_max_live={"AG-pool": ag_live, "RS-pool": rs_live},
        pool_reserved={"AG-pool": pools[0].capacity, "RS-pool": pools[1].capacity},
        meta=dict(graph.meta),
    )


def check_timeline(graph: TaskGraph, tl: Timeline) -> None:
    """Raise AssertionError if dependency soundness or stream exclusivity fails."""
    for t in graph:
        for d in t.deps:
            if tl.start[t.id] < tl.end[d]:
                raise AssertionError(f"{t.label} starts before dependency {graph[d].label} ends")
    for name, seq in tl.streams.items():
        for (a, _, ea), (b, sb, _) in zip(seq, seq[1:]):
            if sb < ea:
                raise AssertionError(f"stream {name}: task {b} overlaps task {a}")


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

class MemoryTrace(NamedTuple):
    peak_bytes: int
    fragmentation: float


def memory_trace(timeline: Timeline, ledger: MemoryLedger | None = None, pools=None) -> MemoryTrace:
    """Peak of static plus transient memory, and ring-pool fragmentation.

    Fragmentation is the share of reserved pool bytes that were never live at
    the same time: sum(reserved - max live) / sum(reserved).
    """
    static = ledger.total_static if ledger is not None else 0
    reserved = dict(timeline.pool_reserved)
    live = {}
    if pools is not None:
        for p in pools:
            reserved[p.kind] = p.capacity
    for kind, slots in timeline.pool_max_live.items():
        slot_bytes = {"AG-pool": "layer_param_bytes", "RS-pool": "layer_grad_bytes"}[kind]
        live[kind] = slots * timeline.meta.get(slot_bytes, 0)
    total = sum(reserved.values())
    wasted = sum(reserved[k] - live.get(k, 0) for k in reserved)
    frag = wasted / total if total else 0.0
    return MemoryTrace(static + timeline.peak_memory, frag)


def peak_grad_bytes(timeline: Timeline) -> int:
    return timeline.peak_of("rs_pool", "grad_accum")


def model_flops(timeline: Timeline, spec: ModelSpec) -> float:
    meta = timeline.meta
    tokens = meta.get("tokens", spec.seq_len * spec.micro_batch_size)
    layers = meta.get("layers", spec.num_layers)
    micro = meta.get("microbatches", spec.num_microbatches)
    return 3.0 * spec.flops_per_token_per_layer * tokens * layers * micro


def utilization_report(timeline: Timeline, spec: ModelSpec, peak_flops: float) -> float:
    if timeline.makespan <= 0:
        raise ValueError("makespan must be positive")
    return model_flops(timeline, spec) / (timeline.makespan * peak_flops)


SUMMARY_COLUMNS = ("mode", "makespan_s", "compute_idle_s", "peak_bytes", "fragmentation", "collective_model")


def summary_row(timeline: Timeline, ledger: MemoryLedger | None = None) -> dict:
    mt = memory_trace(timeline, ledger)
    return {
        "mode": timeline.mode,
        "makespan_s": f"{timeline.makespan:.9g}",
        "compute_idle_s": f"{timeline.compute_idle:.9g}",
        "peak_bytes": mt.peak_bytes,
        "fragmentation": f"{mt.fragmentation:.6f}",
        "collective_model": timeline.meta.get("collective_model", "ring"),
    }


def chrome_trace(graph: TaskGraph, timeline: Timeline, ledger: MemoryLedger | None = None) -> list[dict]:
    """Trace Event Format: one thread per stream, one counter track per memory kind."""
    us = 1e6
    events: list[dict] = []
    tids = {name: i for i, name in enumerate(timeline.streams)}
    events.append({"name": "process_name", "ph": "M", "pid": 0, "tid": 0,
                   "args": {"name": f"rank sim ({timeline.mode}, "
                                         f"{timeline.meta.get('collective_model', 'ring')} collectives)"}})
    for name, tid in tids.items():
        events.append({"name": "thread_name", "ph": "M", "pid": 0, "tid": tid, "args": {"name": name}})
    for name, seq in timeline.streams.items():
        for task_id, s, e in seq:
            t = graph[task_id]
            events.append({
                "name": t.label,
                "cat": t.kind,
                "ph": "X",
                "ts": round(s * us, 6),
                "dur": round((e - s) * us, 6),
                "pid": 0,
                "tid": tids[name],
                "args": {"id": t.id, "bytes": t.bytes},
            })
    for kind in BUFFER_KINDS:
        for t, b in timeline.memory_series({kind}):
            events.append({"name": kind, "ph": "C", "ts": round(t * us, 6), "pid": 0, "args": {"bytes": b}})
    if ledger is not None:
        events.append({"name": "static", "ph": "C", "ts": 0, "pid": 0, "args": {"bytes": ledger.total_static}})
    return events


def write_chrome_trace(path, graph: TaskGraph, timeline: Timeline, ledger: MemoryLedger | None = None):
    with open(path, "w") as fh:
        json.dump(chrome_trace(graph, timeline, ledger), fh, indent=1, sort_keys=True)
        fh.write("\n")

