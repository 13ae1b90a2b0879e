"""Command-line front end.

Four subcommands: validate a job file, schedule a job onto a fleet, sweep
a reference model across link qualities, and simulate a placed job event
by event. File outputs always use fixed names inside --out (schedule.csv,
sweep.csv, events.csv, report.txt plus a figure per command), so reruns
with the same inputs produce the same bytes.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import figures, hardware, ir, pipeline, scheduling
from .errors import DagmeshError
from .sim import (SimConfig, events_to_csv, load_scenario,
                  placement_from_cells, run_simulation)

FLEET_PRESETS = {
    "rtx3080-x50": pipeline.fleet_rtx3080_x50,
    "h100-x4": pipeline.fleet_h100_x4,
}


def _load_model_or_job(ref: str) -> pipeline.ReferenceModel:
    """A model name from the registry, or a path to a job file."""
    if ref in pipeline.MODELS:
        return pipeline.MODELS[ref]()
    graph = ir.load_job(ref)
    cells = tuple(tuple(c) for c in scheduling.topological_cells(graph))
    return pipeline.ReferenceModel(Path(ref).stem, graph, cells)


def _load_fleet(ref: str, compute_column: str, n_stages: int) -> hardware.Fleet:
    if ref in FLEET_PRESETS:
        return FLEET_PRESETS[ref](n_stages, compute_column=compute_column)
    return hardware.load_fleet(ref, compute_column)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


# ----------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    graph = ir.load_job(args.job)
    print(f"{len(graph.nodes)} nodes, 0 errors")
    if args.fleet:
        fleet = hardware.load_fleet(args.fleet, args.compute_column)
        print(f"fleet {fleet.name}: {len(fleet.peers)} peers, 0 errors")
    if args.scenario:
        events = load_scenario(args.scenario)
        print(f"scenario: {len(events)} events, 0 errors")
    return 0


# ----------------------------------------------------------------- schedule


def cmd_schedule(args) -> int:
    model = _load_model_or_job(args.job)
    stages = scheduling.build_stages(model.graph, model.cells)
    fleet = _load_fleet(args.fleet, args.compute_column, len(stages))
    report = scheduling.schedule(stages, fleet,
                                 include_comm=not args.no_comm)
    out = _outdir(args)
    report.to_csv(out / "schedule.csv")
    (out / "report.txt").write_text(report.summary_text() + "\n",
                                    encoding="utf-8")
    figures.render_schedule(report, out / "schedule.png")
    print(report.summary_text())
    print(f"wrote {out / 'schedule.csv'}")
    return 0 if report.feasible else 1


# -------------------------------------------------------------------- sweep


def _sweep_report_text(result: pipeline.SweepResult, spb: int) -> str:
    lines = []
    for r in result.rows:
        asym = ""
        if r.n_batches > 1:
            pace = (r.pipe_time_s - r.latency_s) / (r.n_batches - 1)
            asym = f" asymptotic={spb / pace:.6g}/s"
        lines.append(f"{r.model} on {r.fleet}: bw={r.bandwidth_gbps:g}Gbps "
                     f"alpha={r.alpha_ms:g}ms latency={r.latency_s:.6g}s "
                     f"pipe={r.pipe_time_s:.6g}s throughput={r.throughput:.6g}/s"
                     f"{asym}")
    if result.infeasible:
        lines.append("infeasible points:")
        lines.extend(f"  {msg}" for msg in result.infeasible)
    return "\n".join(lines)


def cmd_sweep(args) -> int:
    model = _load_model_or_job(args.job)
    n_stages = len(model.cells)
    fleet_refs = args.fleet or list(FLEET_PRESETS)
    fleets = [_load_fleet(ref, args.compute_column, n_stages)
              for ref in fleet_refs]
    bandwidths = _floats(args.bandwidth_grid)
    alphas = [ms / 1e3 for ms in _floats(args.alpha_grid)]
    result = pipeline.sweep(model, fleets, bandwidths, alphas, args.nb)
    out = _outdir(args)
    result.to_csv(out / "sweep.csv")
    text = _sweep_report_text(result, model.samples_per_batch)
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    figures.render_sweep(result, out / "sweep.png")
    print(f"{len(result.rows)} grid points "
          f"({len(result.infeasible)} infeasible), wrote {out / 'sweep.csv'}")
    return 0 if result.rows else 1


# ----------------------------------------------------------------- simulate


def _sim_report_text(rep) -> str:
    lines = [f"status: {rep.status}",
             f"mode: {rep.mode}",
             f"batches completed: {len(rep.batch_done)}/{rep.n_batches}",
             f"end_time_s: {rep.end_time:.9g}"]
    if rep.losses is not None:
        shown = ", ".join(f"{v:.6g}" for v in rep.losses)
        lines.append(f"losses: [{shown}]")
    for key in sorted(rep.stats):
        lines.append(f"  {key}: {rep.stats[key]}")
    return "\n".join(lines)


def cmd_simulate(args) -> int:
    model = _load_model_or_job(args.job)
    graph = model.graph
    fleet = _load_fleet(args.fleet, args.compute_column, len(model.cells))
    if graph.placement:
        placement = graph.placement
    else:
        stages = scheduling.build_stages(graph, model.cells)
        schedule_report = scheduling.schedule(stages, fleet)
        if not schedule_report.feasible:
            print(f"error: cannot place job: {schedule_report.reason}",
                  file=sys.stderr)
            return 1
        placement = placement_from_cells(model.cells, schedule_report)
    scenario = load_scenario(args.scenario) if args.scenario else None
    batches = args.batches or int(graph.meta.get("batches", 1))
    config = SimConfig(n_batches=batches, seed=args.seed, mode=args.mode,
                       replication=args.replication,
                       checkpoint_interval=args.checkpoint_interval)
    out = _outdir(args)
    try:
        rep = run_simulation(graph, fleet, placement, scenario, config)
    except DagmeshError as exc:
        partial = getattr(exc, "report", None)
        if partial is not None:
            events_to_csv(partial.events, out / "events.csv")
            (out / "report.txt").write_text(_sim_report_text(partial) + "\n",
                                            encoding="utf-8")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    events_to_csv(rep.events, out / "events.csv")
    (out / "report.txt").write_text(_sim_report_text(rep) + "\n",
                                    encoding="utf-8")
    figures.render_sim(rep.batch_done, out / "sim.png")
    print(_sim_report_text(rep))
    print(f"wrote {out / 'events.csv'}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dagmesh",
        description="Plan and simulate DAG jobs on a fleet of peers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fleet_required=True):
        p.add_argument("--job", required=True,
                       help="job file path, or a model name: "
                            + ", ".join(sorted(pipeline.MODELS)))
        p.add_argument("--fleet", required=fleet_required,
                       help="fleet file path, or a preset: "
                            + ", ".join(sorted(FLEET_PRESETS)))
        p.add_argument("--compute-column", choices=hardware.COMPUTE_COLUMNS,
                       default="tensor", help="which peak rate column to use")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("validate", help="check a job file and print a verdict")
    p.add_argument("--job", required=True)
    p.add_argument("--fleet", default=None)
    p.add_argument("--scenario", default=None)
    p.add_argument("--compute-column", choices=hardware.COMPUTE_COLUMNS,
                   default="tensor")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("schedule", help="assign stages to peers")
    common(p)
    p.add_argument("--no-comm", action="store_true",
                   help="ignore link costs in the objective")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("sweep", help="latency/throughput over a link grid")
    p.add_argument("--job", required=True,
                   help="model name or job file path")
    p.add_argument("--fleet", action="append", default=None,
                   help="fleet file or preset; repeat for several "
                        "(default: all presets)")
    p.add_argument("--compute-column", choices=hardware.COMPUTE_COLUMNS,
                   default="tensor")
    p.add_argument("--out", default="out")
    p.add_argument("--bandwidth-grid", default="0.1,0.5,1,5,10",
                   help="comma list, Gbit/s")
    p.add_argument("--alpha-grid", default="0,5,10",
                   help="comma list, milliseconds")
    p.add_argument("--nb", type=int, default=512,
                   help="batches in flight for the finite-window numbers")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="event-level run of a placed job")
    common(p)
    p.add_argument("--scenario", default=None,
                   help="scenario file; default: everyone joins at t=0")
    p.add_argument("--batches", type=int, default=None,
                   help="number of batches (default: job meta, then 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["train", "inference"], default=None)
    p.add_argument("--replication", type=int, default=2)
    p.add_argument("--checkpoint-interval", type=int, default=1)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DagmeshError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
