"""Figures for the simulate and sweep reports (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .taskgraph import AG_PARAM, AG_POST, AR_DZP, BWD, FWD, OPT_STEP, RECOMPUTE, RS_GRAD  # noqa: E402

COLORS = {
    FWD: "#4c72b0",
    BWD: "#55a868",
    RECOMPUTE: "#8172b2",
    OPT_STEP: "#937860",
    AG_PARAM: "#dd8452",
    AG_POST: "#da8bc3",
    RS_GRAD: "#c44e52",
    AR_DZP: "#8c8c8c",
}

# Fixed metadata keeps PNG output byte-identical across runs.
PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=PNG_META)
    plt.close(fig)


def plot_timeline(graph, timeline, path, title: str | None = None):
    names = list(timeline.streams)
    fig, ax = plt.subplots(figsize=(10, 1.0 + 0.6 * len(names)))
    for row, name in enumerate(names):
        spans = [(s, e - s) for _, s, e in timeline.streams[name]]
        colors = [COLORS.get(graph[tid].kind, "#999999") for tid, _, _ in timeline.streams[name]]
        ax.broken_barh(spans, (row - 0.35, 0.7), facecolors=colors, edgecolor="white", linewidth=0.3)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlabel("time (s)")
    ax.set_title(title or f"{timeline.mode}: makespan {timeline.makespan:.4g} s, "
                          f"compute idle {timeline.compute_idle:.4g} s")
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in COLORS.values()]
    ax.legend(handles, list(COLORS), ncol=4, fontsize=7, loc="upper right", frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_memory(timelines, path, static_bytes: int = 0):
    """Transient memory over time for one or more timelines (one line each)."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for tl in timelines:
        series = tl.memory_samples
        xs = [t for t, _ in series] + [tl.makespan]
        ys = [(b + static_bytes) / 2**20 for _, b in series]
        ys.append(ys[-1])
        ax.step(xs, ys, where="post", label=tl.mode)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("live memory (MiB)")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_sweep(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r["seq_len"] for r in rows]
    ax.plot(xs, [r["tp_bytes"] / 2**30 for r in rows], "o-", label="tensor parallel")
    ax.plot(xs, [r["hzp_bytes"] / 2**30 for r in rows], "s-", label="hierarchical ZeRO")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("sequence length (tokens)")
    ax.set_ylabel("bytes per rank per iteration (GiB)")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)
