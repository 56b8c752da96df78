"""Command-line entry point: plan, simulate, verify, sweep.

Exit codes: 0 ok, 1 bad configuration, 2 no feasible sharding, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .collectives import CostModel
from .compare import SWEEP_COLUMNS, sweep_rows
from .config import ConfigError, RunConfig, load_config
from .memory import PLAN_COLUMNS, NoFeasibleConfig, ledger, plan_search
from .pipeline import SAVINGS_COLUMNS, SavingsReport, UnsupportedVariant
from .sched import (
    SUMMARY_COLUMNS,
    GraphPolicy,
    InvalidPolicy,
    build_task_graph,
    default_pools,
    prelaunch_depth,
    simulate,
    summary_row,
    write_chrome_trace,
)
from .taskgraph import AG_PARAM
from .train import FAULTS, AdamConfig, EquivalenceFailure, TinyModel, VerifyOptions, default_grid, verify_equivalence

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(float(v)) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _seq_list(text: str) -> list[int]:
    out = []
    for v in text.replace(" ", "").split(","):
        if not v:
            continue
        scale = 1
        if v[-1] in "kK":
            v, scale = v[:-1], 1024
        try:
            out.append(int(v) * scale)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad sequence length {v!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_plan(args, run: RunConfig) -> int:
    rows = plan_search(run.spec, run.topo, args.budget, args.activations, base=run.cfg)
    _emit(_csv_text(PLAN_COLUMNS, [r.as_csv_row() for r in rows]), args.out)
    return EXIT_OK


def _policy(args) -> GraphPolicy:
    return GraphPolicy(
        variant=args.pp_variant,
        pipeline_rank=args.pipeline_rank,
        reuse=args.reuse,
        recompute=args.recompute,
        defer_rs=args.defer_rs,
    )


def cmd_simulate(args, run: RunConfig) -> int:
    graph = build_task_graph(run.spec, run.cfg, CostModel(run.topo), _policy(args))
    ag_slots = None
    if args.free_budget is not None:
        ag_slots = prelaunch_depth(args.free_budget, graph.meta["layer_param_bytes"], graph.meta["layers"])
    pools = default_pools(graph, ag_slots=ag_slots, rs_slots=args.rs_slots)
    modes = ["vanilla", "async"] if args.mode == "both" else [args.mode]
    led = ledger(run.spec, run.cfg)
    timelines = [simulate(graph, m, pools) for m in modes]

    _emit(_csv_text(SUMMARY_COLUMNS, [summary_row(tl, led) for tl in timelines]), args.out)
    if args.trace:
        for tl in timelines:
            path = Path(args.trace)
            if len(timelines) > 1:
                path = path.with_name(f"{path.stem}.{tl.mode}{path.suffix or '.json'}")
            write_chrome_trace(path, graph, tl, led)
    if args.savings:
        report = graph.meta.get("reuse") or SavingsReport()
        Path(args.savings).write_text(_csv_text(SAVINGS_COLUMNS, report.rows()))
    if args.figures:
        from .plotting import plot_memory, plot_timeline

        outdir = Path(args.figures)
        outdir.mkdir(parents=True, exist_ok=True)
        for tl in timelines:
            plot_timeline(graph, tl, outdir / f"timeline_{tl.mode}.png")
        plot_memory(timelines, outdir / "memory.png", led.total_static)
    if args.verbose:
        print(f"# AG-param tasks: {graph.count(AG_PARAM)}", file=sys.stderr)
    return EXIT_OK


VERIFY_KEYS = {"dp", "microbatches", "dims", "micro_batch_size", "seeds", "lr"}


def cmd_verify(args, run: RunConfig) -> int:
    section = run.extras.get("verify", {})
    if not isinstance(section, dict) or set(section) - VERIFY_KEYS:
        raise ConfigError(f"[verify] accepts only {', '.join(sorted(VERIFY_KEYS))}")
    dps = args.dp or section.get("dp", [1, 2, 4])
    micro = args.microbatches or section.get("microbatches", [1, 2])
    dims = tuple(section.get("dims", TinyModel().dims))
    seeds = (args.seed,) if args.seed is not None else tuple(section.get("seeds", [0]))
    if any(int(d) < 1 for d in dps) or any(int(m) < 1 for m in micro) or len(dims) < 2:
        raise ConfigError("[verify] dp, microbatches must be >= 1 and dims needs two or more entries")
    opts = VerifyOptions(
        precision=args.precision,
        steps=args.steps,
        seeds=seeds,
        micro_batch_size=int(section.get("micro_batch_size", 2)),
        model=TinyModel(dims),
        fault=args.fault,
    )
    if "lr" in section:
        opts.hp = AdamConfig(lr=float(section["lr"]))
    grid = default_grid(tuple(int(d) for d in dps), tuple(int(m) for m in micro))
    try:
        report = verify_equivalence(grid, opts=opts)
        code = EXIT_OK
    except EquivalenceFailure as exc:
        report = exc.report
        report["error"] = str(exc)
        print(f"verification failed: {exc}", file=sys.stderr)
        code = EXIT_VERIFY
    _emit(json.dumps(report, indent=1, sort_keys=True) + "\n", args.out)
    return code


def cmd_sweep(args, run: RunConfig) -> int:
    rows = sweep_rows(run.spec, run.cfg, args.seq_lens, recompute=args.recompute)
    _emit(_csv_text(SWEEP_COLUMNS, rows), args.out)
    if args.figure:
        from .plotting import plot_sweep

        plot_sweep(rows, args.figure)
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asynchzp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="JSON or TOML file with [model], [parallel], [topology]")
        sp.add_argument("--out", "-o", help="write the report here instead of stdout")

    sp = sub.add_parser("plan", help="rank feasible (z1, z2, z3) shardings by memory and traffic")
    common(sp)
    sp.add_argument("--budget", type=int, required=True, help="per-rank memory budget in bytes")
    sp.add_argument("--activations", type=int, default=0, help="activation memory estimate in bytes")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="simulate one rank's iteration under vanilla/async scheduling")
    common(sp)
    sp.add_argument("--mode", choices=["vanilla", "async", "both"], default="both")
    sp.add_argument("--trace", help="Chrome trace output (suffixed per mode when --mode both)")
    sp.add_argument("--pp-variant", default="1f1b", help="pipeline schedule: 1f1b or interleaved")
    sp.add_argument("--pipeline-rank", type=int, default=0)
    sp.add_argument("--recompute", action="store_true")
    sp.add_argument("--reuse", action="store_true", help="apply the pipeline gather/scatter reuse rules")
    sp.add_argument("--defer-rs", action="store_true", help="hold reduce-scatters until the end of each backward pass")
    sp.add_argument("--free-budget", type=int, help="bytes available for prefetched parameters")
    sp.add_argument("--rs-slots", type=int, help="gradient pool slots")
    sp.add_argument("--savings", help="write the reuse savings CSV here")
    sp.add_argument("--figures", help="directory for timeline and memory PNGs")
    sp.add_argument("--verbose", "-v", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("verify", help="check sharded training against single-device training")
    common(sp)
    sp.add_argument("--precision", choices=["fp64", "mixed"], default="fp64")
    sp.add_argument("--steps", type=int, default=3)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--dp", type=_int_list, help="comma-separated data-parallel sizes")
    sp.add_argument("--microbatches", type=_int_list, help="comma-separated microbatch counts")
    sp.add_argument("--fault", choices=FAULTS, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("sweep", help="TP versus sharded traffic over sequence lengths")
    common(sp)
    sp.add_argument("--seq-lens", type=_seq_list, default=[8192, 32768, 131072],
                    help="comma-separated lengths, 'k' suffix allowed")
    sp.add_argument("--recompute", action="store_true")
    sp.add_argument("--figure", help="PNG output for the sweep plot")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "steps", 0) < 0:
            raise ConfigError("--steps must be >= 0")
        run = load_config(args.config)
        return args.func(args, run)
    except (ConfigError, UnsupportedVariant, InvalidPolicy) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoFeasibleConfig as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
