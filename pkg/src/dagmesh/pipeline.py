"""Latency and throughput estimates for staged pipeline execution.

A schedule gives each participating peer a compute time C and an inbound
read time R per batch. One batch flowing through the whole pipeline takes
the sum of per-peer C + R. With many batches in flight the line settles
into a rhythm set by the slowest single activity, so n batches take

    sum_p (C_p + R_p) + (n - 1) * max_p max(C_p, R_p)

because reads and computes of different batches overlap but a peer never
runs two computes, nor a link two transfers, at once.

Also defined here: transformer encoder reference models sized to published
configurations, and fleet presets that pin their published stage splits.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import ir, scheduling
from .errors import FleetError, SchedulingError
from .hardware import (GPU_TABLE, Fleet, Link, Peer, Role, bandwidth_to_beta,
                       gpu_peak_flops)


@dataclass(frozen=True)
class StageProfile:
    peer: str
    compute_s: float
    read_s: float


def profiles_from_report(report: scheduling.ScheduleReport) -> list[StageProfile]:
    return [StageProfile(row.peer, row.compute_s, row.read_s)
            for row in report.per_peer if row.stage_indices]


def fp_latency(profiles: Sequence[StageProfile]) -> float:
    """Seconds for one batch to traverse every stage once."""
    return sum(p.compute_s + p.read_s for p in profiles)


def bottleneck(profiles: Sequence[StageProfile]) -> float:
    """The activity that paces the steady state: slowest compute or read."""
    if not profiles:
        raise SchedulingError("empty profile list")
    return max(max(p.compute_s, p.read_s) for p in profiles)


def pipeline_time(profiles: Sequence[StageProfile], n_batches: int) -> float:
    if n_batches < 1:
        raise SchedulingError(f"need at least one batch, got {n_batches}")
    return fp_latency(profiles) + (n_batches - 1) * bottleneck(profiles)


def throughput(profiles: Sequence[StageProfile], n_batches: int,
               samples_per_batch: int) -> float:
    """Samples per second over a finite window of n_batches."""
    return n_batches * samples_per_batch / pipeline_time(profiles, n_batches)


def asymptotic_throughput(profiles: Sequence[StageProfile],
                          samples_per_batch: int) -> float:
    """Steady-state samples per second with unbounded batches in flight."""
    return samples_per_batch / bottleneck(profiles)


# ------------------------------------------------------------ reference jobs


@dataclass(frozen=True)
class ReferenceModel:
    name: str
    graph: ir.Graph
    cells: tuple[tuple[str, ...], ...]

    @property
    def samples_per_batch(self) -> int:
        return int(self.graph.meta.get("batch_size", 1))


def _encoder_model(name: str, hidden: int, layers: int, vocab: int,
                   batch: int, seq: int) -> ReferenceModel:
    """Token embedding, `layers` x (attention, feed-forward), output head.

    Split into cells the way the published runs stage it: embedding first,
    then one cell per residual block, then the head. 24 layers make 50 cells.
    """
    nodes = []
    cells: list[tuple[str, ...]] = [("tokens", "embed")]
    block_names = []
    for i in range(1, layers + 1):
        block_names.append(f"l{i:02d}_att")
        block_names.append(f"l{i:02d}_ffn")
    nodes.append({"name": "tokens", "type": "placeholder",
                  "shape": [batch, seq], "users": ["embed"]})
    nodes.append({"name": "embed", "type": "parametric", "op_class": "embedding",
                  "kwargs": {"num_embeddings": vocab, "embedding_dim": hidden},
                  "args": ["tokens"], "users": [block_names[0]]})
    prev = "embed"
    for j, bname in enumerate(block_names):
        op = "attention_block" if bname.endswith("att") else "ffn_block"
        nxt = block_names[j + 1] if j + 1 < len(block_names) else "head"
        nodes.append({"name": bname, "type": "parametric", "op_class": op,
                      "args": [prev], "users": [nxt]})
        cells.append((bname,))
        prev = bname
    nodes.append({"name": "head", "type": "parametric", "op_class": "linear",
                  "kwargs": {"out_features": hidden}, "args": [prev],
                  "users": []})
    cells.append(("head",))
    meta = {"batch_size": batch, "sequence_length": seq,
            "data": {"per_node": {"tokens": {"kind": "ids", "high": vocab}}}}
    graph = ir.parse_job_definition({"meta": meta, "nodes": nodes})
    return ReferenceModel(name, graph, tuple(cells))


def build_bert_large(batch: int = 8, seq: int = 512) -> ReferenceModel:
    return _encoder_model("bert-large", hidden=1024, layers=24, vocab=30522,
                          batch=batch, seq=seq)


def build_gpt3_24(batch: int = 8, seq: int = 512) -> ReferenceModel:
    return _encoder_model("gpt3-24", hidden=4096, layers=24, vocab=50257,
                          batch=batch, seq=seq)


MODELS: dict[str, Callable[[], ReferenceModel]] = {
    "bert-large": build_bert_large,
    "gpt3-24": build_gpt3_24,
}


# --------------------------------------------------------------- fleet presets


def pinned_one_per_peer(n_stages: int) -> tuple[tuple[int, ...], ...]:
    return tuple((i,) for i in range(n_stages))


def pinned_four_stage(n_stages: int) -> tuple[tuple[int, ...], ...]:
    """First and last stage alone, the interior split into two equal runs."""
    if n_stages < 4:
        raise SchedulingError(f"four-stage split needs >= 4 stages, got {n_stages}")
    mid = n_stages // 2
    return ((0,), tuple(range(1, mid)), tuple(range(mid, n_stages - 1)),
            (n_stages - 1,))


DEFAULT_LINK = Link(alpha=5e-3, beta=bandwidth_to_beta(1.0))


def _gpu_fleet(name: str, model: str, count: int, pinned, link: Link,
               compute_column: str) -> Fleet:
    if model not in GPU_TABLE:
        raise FleetError(f"unknown gpu model {model!r}")
    spec = GPU_TABLE[model]
    peers = {}
    for k in range(1, count + 1):
        pid = str(k)
        peers[pid] = Peer(id=pid, role=Role.ANTNODE,
                          peak_flops=gpu_peak_flops(spec, compute_column),
                          lam=1.0,
                          gpu_bytes=spec.memory_gb * 2 ** 30,
                          cpu_bytes=32 * 2 ** 30,
                          disk_bytes=256 * 2 ** 30)
    return Fleet(peers=peers, default_link=link, links={}, backup_pool=(),
                 msg_ratio=1.0, pinned_runs=pinned, name=name)


def fleet_rtx3080_x50(n_stages: int = 50, link: Link = DEFAULT_LINK,
                      compute_column: str = "tensor") -> Fleet:
    """Fifty consumer cards, one published stage each."""
    return _gpu_fleet("rtx3080-x50", "rtx3080", 50,
                      pinned_one_per_peer(n_stages), link, compute_column)


def fleet_h100_x4(n_stages: int = 50, link: Link = DEFAULT_LINK,
                  compute_column: str = "tensor") -> Fleet:
    """Four datacenter cards holding the published four-run split."""
    return _gpu_fleet("h100-x4", "h100", 4, pinned_four_stage(n_stages),
                      link, compute_column)


def reference_fleets(n_stages: int = 50, link: Link = DEFAULT_LINK,
                     compute_column: str = "tensor") -> list[Fleet]:
    return [fleet_rtx3080_x50(n_stages, link, compute_column),
            fleet_h100_x4(n_stages, link, compute_column)]


# ---------------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepRow:
    model: str
    fleet: str
    bandwidth_gbps: float
    alpha_ms: float
    n_batches: int
    latency_s: float
    pipe_time_s: float
    throughput: float


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    infeasible: list[str] = field(default_factory=list)

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "fleet", "bandwidth_gbps", "alpha_ms", "n_b",
                        "latency_s", "pipe_time_s", "throughput"])
            for r in self.rows:
                w.writerow([r.model, r.fleet, f"{r.bandwidth_gbps:g}",
                            f"{r.alpha_ms:g}", r.n_batches,
                            f"{r.latency_s:.9g}", f"{r.pipe_time_s:.9g}",
                            f"{r.throughput:.9g}"])


def sweep(model: ReferenceModel, fleets: Sequence[Fleet],
          bandwidth_gbps: Sequence[float], alpha_s: Sequence[float],
          n_batches: int) -> SweepResult:
    """Schedule the model on each fleet across a link-quality grid."""
    stages = scheduling.build_stages(model.graph, model.cells)
    result = SweepResult()
    for fleet, bw, alpha in itertools.product(fleets, bandwidth_gbps, alpha_s):
        tuned = fleet.with_default_link(Link(alpha=alpha,
                                             beta=bandwidth_to_beta(bw)))
        report = scheduling.schedule(stages, tuned)
        if not report.feasible:
            result.infeasible.append(
                f"{model.name} on {fleet.name} at {bw:g} Gbit/s, "
                f"alpha {alpha * 1e3:g} ms: {report.reason}")
            continue
        profiles = profiles_from_report(report)
        result.rows.append(SweepRow(
            model.name, fleet.name, bw, alpha * 1e3, n_batches,
            fp_latency(profiles), pipeline_time(profiles, n_batches),
            throughput(profiles, n_batches, model.samples_per_batch)))
    return result
