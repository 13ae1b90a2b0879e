"""Figure rendering for the command-line reports.

Everything draws through the Agg backend straight to files; nothing here
opens a window. The delimited outputs stay the machine-readable contract,
figures are a readable companion.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import pipeline, scheduling


def render_schedule(report: scheduling.ScheduleReport, path) -> None:
    """Per-peer load bars, compute and read stacked."""
    rows = [r for r in report.per_peer if r.stage_indices]
    peers = [r.peer for r in rows]
    compute = [r.compute_s for r in rows]
    read = [r.read_s for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(rows) + 2), 4))
    xs = range(len(rows))
    ax.bar(xs, compute, label="compute", color="#4878cf")
    ax.bar(xs, read, bottom=compute, label="read", color="#ee854a")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(peers, rotation=90 if len(rows) > 12 else 0, fontsize=8)
    ax.set_xlabel("peer")
    ax.set_ylabel("seconds per batch")
    ax.set_title(f"per-peer load, makespan {report.makespan:.4g} s")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sweep(result: pipeline.SweepResult, path) -> None:
    """Throughput and latency against bandwidth, one line per fleet/alpha."""
    fig, (ax_thr, ax_lat) = plt.subplots(1, 2, figsize=(11, 4))
    series: dict[tuple[str, float], list[pipeline.SweepRow]] = {}
    for row in result.rows:
        series.setdefault((row.fleet, row.alpha_ms), []).append(row)
    for (fleet, alpha_ms), rows in sorted(series.items()):
        rows = sorted(rows, key=lambda r: r.bandwidth_gbps)
        xs = [r.bandwidth_gbps for r in rows]
        label = f"{fleet}, alpha {alpha_ms:g} ms"
        ax_thr.plot(xs, [r.throughput for r in rows], marker="o", label=label)
        ax_lat.plot(xs, [r.latency_s for r in rows], marker="o", label=label)
    for ax, ylabel in ((ax_thr, "samples / s"), (ax_lat, "single-batch latency, s")):
        ax.set_xscale("log")
        ax.set_xlabel("bandwidth, Gbit/s")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
    ax_lat.set_yscale("log")
    if series:
        ax_thr.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sim(batch_done: dict[int, float], path) -> None:
    """Batch completion times over the simulated run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if batch_done:
        batches = sorted(batch_done)
        ax.step([batch_done[b] for b in batches],
                [b + 1 for b in batches], where="post")
    ax.set_xlabel("simulated time, s")
    ax.set_ylabel("batches completed")
    ax.set_title("completion trace")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
