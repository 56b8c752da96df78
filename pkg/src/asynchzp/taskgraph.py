"""Per-iteration task graphs of one simulated rank.

Tasks are stored in program order (the order a training loop issues them) and
a task's id is its position in that order.  Dependencies always point at
lower ids.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable

FWD = "FWD"
BWD = "BWD"
RECOMPUTE = "FWD-recompute"
AG_PARAM = "AG-param"
RS_GRAD = "RS-grad"
AR_DZP = "AR-dzp"
OPT_STEP = "OPT-step"
AG_POST = "AG-post-step"

COMPUTE_KINDS = frozenset({FWD, BWD, RECOMPUTE, OPT_STEP})
AG_KINDS = frozenset({AG_PARAM, AG_POST})
RS_KINDS = frozenset({RS_GRAD, AR_DZP})
COMM_KINDS = AG_KINDS | RS_KINDS


def stream_role(kind: str) -> str:
    if kind in COMPUTE_KINDS:
        return "compute"
    if kind in AG_KINDS:
        return "ag"
    if kind in RS_KINDS:
        return "rs"
    raise ValueError(f"unknown task kind {kind!r}")


@dataclass(frozen=True)
class Task:
    id: int
    kind: str
    layer: int = -1
    microbatch: int = -1
    pass_name: str = "none"  # forward | backward | none
    duration: float = 0.0
    bytes: int = 0
    deps: tuple[int, ...] = ()
    # Index of the schedule entry (F or B pass instance) the task belongs to;
    # -1 for per-iteration tasks.
    entry: int = -1
    vstage: int = 0

    @property
    def is_comm(self) -> bool:
        return self.kind in COMM_KINDS

    @property
    def label(self) -> str:
        parts = [self.kind]
        if self.layer >= 0:
            parts.append(f"L{self.layer}")
        if self.microbatch >= 0:
            parts.append(f"mb{self.microbatch}")
        return " ".join(parts)


class CycleError(ValueError):
    pass


@dataclass
class TaskGraph:
    tasks: list[Task]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, t in enumerate(self.tasks):
            if t.id != i:
                raise ValueError(f"task at position {i} has id {t.id}")
            for d in t.deps:
                if not 0 <= d < i:
                    raise CycleError(f"task {i} ({t.label}) depends on {d}; deps must precede")

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    def counts(self) -> Counter:
        return Counter(t.kind for t in self.tasks)

    def count(self, kind: str) -> int:
        return sum(1 for t in self.tasks if t.kind == kind)

    def of_kind(self, *kinds: str) -> list[Task]:
        return [t for t in self.tasks if t.kind in kinds]

    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {t.id: [] for t in self.tasks}
        for t in self.tasks:
            for d in t.deps:
                out[d].append(t.id)
        return out

    def compute_busy(self) -> float:
        return sum(t.duration for t in self.tasks if t.kind in COMPUTE_KINDS)

    def comm_time(self) -> float:
        return sum(t.duration for t in self.tasks if t.is_comm)

    def scale_comm(self, factor: float) -> TaskGraph:
        """Copy of the graph with every communication duration multiplied by ``factor``."""
        tasks = [replace(t, duration=t.duration * factor) if t.is_comm else t for t in self.tasks]
        return TaskGraph(tasks, dict(self.meta))

    def with_durations(self, durations: dict[str, float]) -> TaskGraph:
        """Copy of the graph with per-kind durations overridden."""
        tasks = [replace(t, duration=durations[t.kind]) if t.kind in durations else t for t in self.tasks]
        return TaskGraph(tasks, dict(self.meta))

    @classmethod
    def renumbered(cls, tasks: Iterable[Task], meta: dict) -> TaskGraph:
        """Build a graph from tasks in their new program order, remapping ids."""
        tasks = list(tasks)
        remap = {t.id: i for i, t in enumerate(tasks)}
        out = []
        for i, t in enumerate(tasks):
            deps = tuple(sorted({remap[d] for d in t.deps}))
            out.append(replace(t, id=i, deps=deps))
        return cls(out, meta)
