"""1F1B and interleaved-1F1B schedules and the sharded-parameter reuse rules.

Reuse rules, applied per pipeline rank when ``pp > 1``:

* R1: two adjacent passes of the same kind on the same virtual stage share one
  parameter all-gather (the later pass reads the cached parameters).
* R2: adjacent backward passes on the same virtual stage accumulate their
  gradients and issue a single reduce-scatter after the last of them.
* R3: in the steady phase a forward pass reuses the parameters of the forward
  pass two entries earlier (same virtual stage) across one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

from .taskgraph import AG_PARAM, BWD, FWD, RECOMPUTE, RS_GRAD, TaskGraph, Task

VARIANTS = ("1f1b", "interleaved")


class UnsupportedVariant(ValueError):
    pass


class ScheduleGraphMismatch(ValueError):
    pass


class Entry(NamedTuple):
    pass_name: str  # "F" | "B"
    microbatch: int
    vstage: int
    phase: str  # warmup | steady | cooldown


@dataclass(frozen=True)
class PipeSchedule:
    pp: int
    vpp: int
    microbatches: int
    variant: str
    ranks: tuple[tuple[Entry, ...], ...]

    def for_rank(self, rank: int) -> tuple[Entry, ...]:
        return self.ranks[rank]

    def render(self, rank: int) -> str:
        return " ".join(
            f"{e.pass_name}{e.microbatch + 1}" + (f".{e.vstage}" if self.vpp > 1 else "")
            for e in self.ranks[rank]
        )


def _order(m: int, pp: int, vpp: int, backward: bool) -> list[tuple[int, int]]:
    if vpp == 1:
        return [(k, 0) for k in range(m)]
    chunks = range(vpp - 1, -1, -1) if backward else range(vpp)
    seq = []
    for g0 in range(0, m, pp):
        group = range(g0, min(g0 + pp, m))
        for c in chunks:
            seq.extend((mb, c) for mb in group)
    return seq


def _rank_schedule(rank: int, pp: int, vpp: int, m: int) -> tuple[Entry, ...]:
    fseq = _order(m, pp, vpp, backward=False)
    bseq = _order(m, pp, vpp, backward=True)
    total = len(fseq)
    if vpp == 1:
        warmup = min(pp - rank - 1, total)
    else:
        warmup = min((pp - rank - 1) * 2 + (vpp - 1) * pp, total)

    out: list[tuple[str, int, int]] = []
    done_f: set[tuple[int, int]] = set()
    fi = bi = 0
    for _ in range(warmup):
        done_f.add(fseq[fi])
        out.append(("F",) + fseq[fi])
        fi += 1
    last_f_pos = len(out) - 1
    while fi < total:
        done_f.add(fseq[fi])
        out.append(("F",) + fseq[fi])
        fi += 1
        last_f_pos = len(out) - 1
        # Only pair a backward whose forward already ran on this rank.
        if bseq[bi] in done_f:
            out.append(("B",) + bseq[bi])
            bi += 1
    steady_end = last_f_pos + 1 if fi > warmup else warmup - 1
    while bi < total:
        out.append(("B",) + bseq[bi])
        bi += 1

    entries = []
    for i, (p, mb, v) in enumerate(out):
        if i < warmup:
            phase = "warmup"
        elif i <= steady_end:
            phase = "steady"
        else:
            phase = "cooldown"
        entries.append(Entry(p, mb, v, phase))
    return tuple(entries)


def build_schedule(pp: int, vpp: int, microbatches: int, variant: str = "1f1b") -> PipeSchedule:
    if variant not in VARIANTS:
        raise UnsupportedVariant(f"pipeline variant {variant!r} is not implemented")
    if pp < 1 or vpp < 1 or microbatches < 1:
        raise ValueError("pp, vpp and microbatches must be >= 1")
    if variant == "1f1b" and vpp != 1:
        raise UnsupportedVariant("plain 1F1B has one virtual stage per rank; use 'interleaved'")
    if vpp > 1 and pp == 1:
        raise ValueError("vpp > 1 requires pp > 1")
    ranks = tuple(_rank_schedule(r, pp, vpp, microbatches) for r in range(pp))
    return PipeSchedule(pp, vpp, microbatches, variant, ranks)


# --------------------------------------------------------------------------
# Reuse
# --------------------------------------------------------------------------

@dataclass
class SavingsReport:
    eliminated_ag: dict[str, int] = field(default_factory=lambda: {"R1": 0, "R2": 0, "R3": 0})
    merged_rs: dict[str, int] = field(default_factory=lambda: {"R1": 0, "R2": 0, "R3": 0})
    extra_cached_bytes: dict[str, int] = field(default_factory=lambda: {"R1": 0, "R2": 0, "R3": 0})

    @property
    def total_eliminated_ag(self) -> int:
        return sum(self.eliminated_ag.values())

    @property
    def total_merged_rs(self) -> int:
        return sum(self.merged_rs.values())

    def rows(self) -> list[dict]:
        return [
            {
                "rule": rule,
                "eliminated_ag": self.eliminated_ag[rule],
                "merged_rs": self.merged_rs[rule],
                "extra_cached_bytes": self.extra_cached_bytes[rule],
            }
            for rule in ("R1", "R2", "R3")
        ]


SAVINGS_COLUMNS = ("rule", "eliminated_ag", "merged_rs", "extra_cached_bytes")


def reuse_sources(entries: tuple[Entry, ...], pp: int) -> tuple[list[int], list[str | None], list[int]]:
    """Which entry's parameter gather each entry reads, and the RS run ends.

    Returns ``(source, rule, rs_target)``: ``source[i]`` is the entry whose
    all-gather feeds entry ``i``; ``rule[i]`` names the rule that eliminated
    entry ``i``'s gather (or None); ``rs_target[i]`` is the backward entry
    whose reduce-scatter carries entry ``i``'s gradients.
    """
    n = len(entries)
    source = list(range(n))
    rule: list[str | None] = [None] * n
    rs_target = list(range(n))
    if pp == 1:
        return source, rule, rs_target
    for i in range(1, n):
        e, prev = entries[i], entries[i - 1]
        if e.pass_name == prev.pass_name and e.vstage == prev.vstage:
            source[i] = source[i - 1]
            rule[i] = "R1"
        elif (
            e.pass_name == "F"
            and e.phase == "steady"
            and i >= 2
            and prev.pass_name == "B"
            and entries[i - 2].pass_name == "F"
            and entries[i - 2].vstage == e.vstage
        ):
            source[i] = source[i - 2]
            rule[i] = "R3"
    for i in range(n - 2, -1, -1):
        e, nxt = entries[i], entries[i + 1]
        if e.pass_name == "B" and nxt.pass_name == "B" and e.vstage == nxt.vstage:
            rs_target[i] = rs_target[i + 1]
    return source, rule, rs_target


def apply_reuse(schedule: PipeSchedule, graph: TaskGraph) -> tuple[TaskGraph, SavingsReport]:
    rank = graph.meta.get("pipeline_rank", 0)
    entries = schedule.for_rank(rank)
    if tuple(graph.meta.get("entries", ())) != entries:
        raise ScheduleGraphMismatch("graph was not built for this schedule and rank")
    source, rule, rs_target = reuse_sources(entries, schedule.pp)
    report = SavingsReport()
    if all(s == i for i, s in enumerate(source)) and all(t == i for i, t in enumerate(rs_target)):
        return TaskGraph(list(graph.tasks), {**graph.meta, "reuse": report}), report

    ag = {}  # (entry, layer) -> AG task id
    rs = {}  # (entry, layer) -> RS task id
    bwd = {}  # (entry, layer) -> BWD task id
    for t in graph:
        if t.kind == AG_PARAM and t.entry >= 0:
            ag[(t.entry, t.layer)] = t.id
        elif t.kind == RS_GRAD:
            rs[(t.entry, t.layer)] = t.id
        elif t.kind == BWD:
            bwd[(t.entry, t.layer)] = t.id

    redirect: dict[int, int] = {}
    cached_layers: dict[str, set[int]] = {"R1": set(), "R2": set(), "R3": set()}
    for (entry, layer), tid in ag.items():
        src = source[entry]
        if src != entry:
            redirect[tid] = ag[(src, layer)]
            report.eliminated_ag[rule[entry]] += 1
            cached_layers[rule[entry]].add(layer)

    extra_rs_deps: dict[int, list[int]] = {}
    for (entry, layer), tid in rs.items():
        target = rs_target[entry]
        if target != entry:
            keep = rs[(target, layer)]
            redirect[tid] = keep
            extra_rs_deps.setdefault(keep, []).append(bwd[(entry, layer)])
            report.merged_rs["R2"] += 1
            cached_layers["R2"].add(layer)

    tasks = []
    for t in graph:
        if t.id in redirect:
            continue
        deps = {redirect.get(d, d) for d in t.deps}
        deps.update(extra_rs_deps.get(t.id, ()))
        tasks.append(replace(t, deps=tuple(sorted(deps))))

    param_bytes = graph.meta.get("layer_param_bytes", 0)
    grad_bytes = graph.meta.get("layer_grad_bytes", 0)
    for r in ("R1", "R3"):
        report.extra_cached_bytes[r] = len(cached_layers[r]) * param_bytes
    report.extra_cached_bytes["R2"] = len(cached_layers["R2"]) * grad_bytes

    meta = dict(graph.meta)
    meta["reuse"] = report
    return TaskGraph.renumbered(tasks, meta), report


def recompute_rule(graph: TaskGraph, recompute: bool) -> TaskGraph:
    """Insert a forward recomputation before every backward task.

    The recomputation reads the parameters gathered for the backward pass,
    so no all-gather is added.
    """
    if not recompute:
        return graph
    fwd_of = {(t.layer, t.microbatch): t for t in graph if t.kind == FWD}
    tasks: list[Task] = []
    next_id = len(graph)
    for t in graph:
        if t.kind == BWD:
            fwd = fwd_of[(t.layer, t.microbatch)]
            rc = replace(
                fwd,
                id=next_id,
                kind=RECOMPUTE,
                pass_name="backward",
                deps=t.deps,
                entry=t.entry,
                vstage=t.vstage,
            )
            next_id += 1
            tasks.append(rc)
            tasks.append(replace(t, deps=(rc.id,) + tuple(d for d in t.deps if graph[d].kind != AG_PARAM)))
        else:
            tasks.append(t)
    meta = dict(graph.meta)
    meta["recompute"] = True
    return TaskGraph.renumbered(tasks, meta)
