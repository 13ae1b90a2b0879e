"""Assigning pipeline stages to peers under capacity constraints.

Stages are an ordered list of DAG cells. A feasible assignment gives every
peer at most one contiguous run of stages, covers all stages, and respects
the per-peer device, host and disk capacities. The objective is the
makespan: the largest per-peer load, where a load is the peer's compute
seconds plus (by default) the time to read inputs crossing into its run.

Three solvers share the same evaluation code: an exhaustive enumeration
kept as an oracle for small instances, an exact dynamic program over
(stage prefix, used-peer subset) states for moderate sizes, and a
proportional split refined by boundary hill-climbing for everything else.
The dynamic programs price crossing reads with the fleet's default link;
when pairwise overrides exist the result is polished by exact hill-climbs.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import hardware, ir
from .errors import SchedulingError
from .hardware import Fleet, comm_time, effective_speed

Runs = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True)
class Stage:
    """One pipeline cell: its compute weight, memory demand and inbound edges."""

    index: int
    label: str
    flops: float
    gpu_bytes: float
    cpu_bytes: float
    disk_bytes: float
    in_edges: tuple[tuple[int, int], ...] = ()  # (source stage, message bytes)


@dataclass(frozen=True)
class PeerLoad:
    peer: str
    stage_indices: tuple[int, ...]
    compute_s: float
    read_s: float
    load_s: float
    gpu_bytes: float
    cpu_bytes: float
    disk_bytes: float


@dataclass(frozen=True)
class ScheduleReport:
    stages: tuple[Stage, ...]
    runs: Runs
    per_peer: tuple[PeerLoad, ...]
    makespan: float
    feasible: bool
    reason: str = ""
    include_comm: bool = True
    trace: tuple[str, ...] = ()

    @property
    def assignment(self) -> dict[int, str]:
        return {s: peer for peer, idxs in self.runs for s in idxs}

    def load_of(self, peer: str) -> PeerLoad:
        for row in self.per_peer:
            if row.peer == peer:
                return row
        raise SchedulingError(f"peer {peer!r} not in schedule")

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["peer_id", "stage_ids", "C_p_s", "R_p_s", "load_s",
                        "gpu_bytes_used"])
            for row in self.per_peer:
                w.writerow([row.peer, format_stage_run(row.stage_indices),
                            f"{row.compute_s:.9g}", f"{row.read_s:.9g}",
                            f"{row.load_s:.9g}", int(row.gpu_bytes)])

    def summary_text(self) -> str:
        lines = [f"stages: {len(self.stages)}",
                 f"feasible: {self.feasible}" + (f" ({self.reason})" if self.reason else ""),
                 f"makespan_s: {self.makespan:.9g}"]
        for row in self.per_peer:
            lines.append(f"  peer {row.peer}: stages {format_stage_run(row.stage_indices)}"
                         f" load {row.load_s:.6g}s (C {row.compute_s:.6g}s"
                         f" R {row.read_s:.6g}s)")
        return "\n".join(lines)


def format_stage_run(indices: Sequence[int]) -> str:
    """Human form of a contiguous run, 1-based: '', '3' or '2-25'."""
    if not indices:
        return ""
    lo, hi = min(indices) + 1, max(indices) + 1
    return str(lo) if lo == hi else f"{lo}-{hi}"


def build_stages(graph: ir.Graph, cells: Sequence[Sequence[str]]) -> list[Stage]:
    """Turn an ordered cell partition of the graph into scheduler stages."""
    owner: dict[str, int] = {}
    for idx, cell in enumerate(cells):
        for name in cell:
            if name in owner:
                raise SchedulingError(f"node {name!r} appears in two cells")
            if name not in graph:
                raise SchedulingError(f"cell references unknown node {name!r}")
            owner[name] = idx
    missing = [n for n in graph.nodes if n not in owner]
    if missing:
        raise SchedulingError(f"cells do not cover nodes {missing}")

    stages = []
    for idx, cell in enumerate(cells):
        edges = []
        seen_sources = set()
        for name in cell:
            node = graph.node(name)
            for a in node.args:
                src = owner[a]
                if src > idx:
                    raise SchedulingError(
                        f"edge {a} -> {name} runs backwards across cells {src} -> {idx}")
                if src == idx or a in seen_sources:
                    continue
                if graph.node(a).kind is ir.OpKind.PLACEHOLDER:
                    # input batches come from the data layer, not over links
                    continue
                # one transfer per produced value per receiving cell
                seen_sources.add(a)
                edges.append((src, hardware.message_bytes(graph.node(a))))
        foot = hardware.memory_footprint(graph, cell)
        flops = float(sum(ir.op_flops(graph.node(n)) for n in cell))
        label = cell[0] if len(cell) == 1 else f"{cell[0]}..{cell[-1]}"
        stages.append(Stage(idx, label, flops, foot.gpu_bytes, foot.cpu_bytes,
                            foot.disk_bytes, tuple(edges)))
    return stages


def topological_cells(graph: ir.Graph) -> list[list[str]]:
    """Default cell split for arbitrary jobs: one node per stage."""
    return [[name] for name in graph.topo_order]


# ----------------------------------------------------------------- evaluation


def _run_cost(stages: Sequence[Stage], fleet: Fleet, peer_of: Mapping[int, str],
              peer: str, indices: Sequence[int], include_comm: bool) -> tuple[float, float]:
    p = fleet.peer(peer)
    speed = effective_speed(p)
    compute = sum(stages[i].flops for i in indices) / speed
    read = 0.0
    if include_comm:
        inside = set(indices)
        for i in indices:
            for src, nbytes in stages[i].in_edges:
                if src not in inside:
                    link = fleet.link_between(peer_of[src], peer)
                    read += comm_time(link, nbytes * fleet.msg_ratio)
    return compute, read


def _fits(stages, fleet, peer, indices) -> bool:
    p = fleet.peer(peer)
    return (sum(stages[i].gpu_bytes for i in indices) <= p.gpu_bytes
            and sum(stages[i].cpu_bytes for i in indices) <= p.cpu_bytes
            and sum(stages[i].disk_bytes for i in indices) <= p.disk_bytes)


def verify_assignment(stages: Sequence[Stage], fleet: Fleet, runs: Runs) -> str:
    """Independent feasibility check; returns '' or the violated constraint."""
    seen: dict[int, str] = {}
    used_peers = set()
    for peer, indices in runs:
        if not indices:
            continue
        if peer in used_peers:
            return f"peer {peer} holds two runs"
        used_peers.add(peer)
        if peer not in fleet.peers:
            return f"unknown peer {peer}"
        ordered = sorted(indices)
        if ordered != list(range(ordered[0], ordered[-1] + 1)):
            return f"peer {peer} run {ordered} is not contiguous"
        for i in ordered:
            if i in seen:
                return f"stage {i + 1} assigned twice"
            seen[i] = peer
        p = fleet.peer(peer)
        for dim, cap in (("gpu", p.gpu_bytes), ("cpu", p.cpu_bytes), ("disk", p.disk_bytes)):
            used = sum(getattr(stages[i], f"{dim}_bytes") for i in ordered)
            if used > cap:
                return (f"peer {peer} exceeds {dim} capacity: "
                        f"{used:.0f} > {cap:.0f} bytes")
    if len(seen) != len(stages):
        missing = sorted(set(range(len(stages))) - set(seen))
        return f"stages {[m + 1 for m in missing]} unassigned"
    return ""


def _evaluate(stages, fleet: Fleet, runs: Runs, include_comm: bool,
              trace: tuple[str, ...] = ()) -> ScheduleReport:
    violation = verify_assignment(stages, fleet, runs)
    peer_of = {i: peer for peer, idxs in runs for i in idxs}
    rows = []
    makespan = 0.0
    assigned = {peer for peer, idxs in runs if idxs}
    ordered_runs = tuple(sorted(((p, tuple(sorted(i))) for p, i in runs if i),
                                key=lambda r: r[1][0]))
    for peer, indices in ordered_runs:
        compute, read = _run_cost(stages, fleet, peer_of, peer, indices, include_comm)
        load = compute + read
        makespan = max(makespan, load)
        rows.append(PeerLoad(peer, indices, compute, read, load,
                             sum(stages[i].gpu_bytes for i in indices),
                             sum(stages[i].cpu_bytes for i in indices),
                             sum(stages[i].disk_bytes for i in indices)))
    for peer in fleet.worker_ids():
        if peer not in assigned:
            rows.append(PeerLoad(peer, (), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
    return ScheduleReport(tuple(stages), ordered_runs, tuple(rows), makespan,
                          feasible=(violation == ""), reason=violation,
                          include_comm=include_comm, trace=trace)


def evaluate_runs(stages: Sequence[Stage], fleet: Fleet, runs: Runs, *,
                  include_comm: bool = True,
                  trace: tuple[str, ...] = ()) -> ScheduleReport:
    """Score a concrete assignment without optimizing it."""
    return _evaluate(list(stages), fleet, runs, include_comm, trace)


# -------------------------------------------------------------------- solvers


def brute_force_schedule(stages: Sequence[Stage], fleet: Fleet, *,
                         include_comm: bool = True,
                         limit: int = 1_000_000) -> ScheduleReport:
    """Exhaustive optimum over contiguous assignments. Oracle for tests."""
    stages = list(stages)
    workers = fleet.worker_ids()
    _check_inputs(stages, workers)
    n, p = len(stages), len(workers)
    total = sum(math.comb(n - 1, r - 1) * math.perm(p, r)
                for r in range(1, min(n, p) + 1))
    if total > limit:
        raise SchedulingError(f"instance too large for enumeration: "
                              f"{total} contiguous assignments > {limit}")

    best: tuple[float, Runs] | None = None
    for r in range(1, min(n, p) + 1):
        for cuts in itertools.combinations(range(1, n), r - 1):
            bounds = (0,) + cuts + (n,)
            chunks = [tuple(range(bounds[k], bounds[k + 1])) for k in range(r)]
            for chosen in itertools.permutations(workers, r):
                runs = tuple(zip(chosen, chunks))
                if not all(_fits(stages, fleet, pe, idxs) for pe, idxs in runs):
                    continue
                peer_of = {i: pe for pe, idxs in runs for i in idxs}
                mk = max(sum(_run_cost(stages, fleet, peer_of, pe, idxs, include_comm))
                         for pe, idxs in runs)
                if best is None or mk < best[0]:
                    best = (mk, runs)
    if best is None:
        report = _evaluate(stages, fleet, ((workers[0], tuple(range(n))),),
                           include_comm, ("enumeration: no feasible assignment",))
        return _mark_infeasible(report, "no feasible assignment under memory constraints")
    return _evaluate(stages, fleet, best[1], include_comm,
                     (f"enumeration over {total} assignments",))


def _check_inputs(stages, workers):
    if not stages:
        raise SchedulingError("empty stage list")
    if not workers:
        raise SchedulingError("empty fleet: no schedulable peers")


def _subset_dp(stages, fleet: Fleet, workers, include_comm) -> Runs | None:
    """Exact DP over (stages placed, peers used); default link prices reads."""
    n = len(stages)
    link = fleet.default_link
    speeds = [effective_speed(fleet.peer(w)) for w in workers]

    def chunk_cost(i, j, wi):
        compute = sum(stages[s].flops for s in range(i, j)) / speeds[wi]
        read = 0.0
        if include_comm:
            for s in range(i, j):
                for src, nbytes in stages[s].in_edges:
                    if src < i:
                        read += comm_time(link, nbytes * fleet.msg_ratio)
        return compute + read

    best: dict[tuple[int, int], tuple[float, Runs]] = {(0, 0): (0.0, ())}
    for i in range(n):
        layer = sorted(k for k in best if k[0] == i)
        for key in layer:
            mk, runs = best[key]
            _, mask = key
            for wi, w in enumerate(workers):
                if mask & (1 << wi):
                    continue
                for j in range(i + 1, n + 1):
                    if not _fits(stages, fleet, w, range(i, j)):
                        break  # footprints only grow with j
                    new_mk = max(mk, chunk_cost(i, j, wi))
                    nkey = (j, mask | (1 << wi))
                    cur = best.get(nkey)
                    if cur is None or new_mk < cur[0]:
                        best[nkey] = (new_mk, runs + ((w, tuple(range(i, j))),))
    finals = sorted((v[0], k[1]) for k, v in best.items() if k[0] == n)
    if not finals:
        return None
    _, mask = finals[0]
    return best[(n, mask)][1]


def _proportional_runs(stages, fleet: Fleet, workers) -> Runs:
    """Prefix split with boundaries placed proportionally to peer speed."""
    n = len(stages)
    speeds = [effective_speed(fleet.peer(w)) for w in workers]
    total_speed = sum(speeds)
    total_flops = sum(s.flops for s in stages) or 1.0
    prefix = list(itertools.accumulate(s.flops for s in stages))
    runs = []
    start, acc = 0, 0.0
    for wi, w in enumerate(workers):
        if start >= n:
            break
        if wi == len(workers) - 1:
            end = n
        else:
            acc += total_flops * speeds[wi] / total_speed
            end = start + 1
            while end < n and prefix[end - 1] < acc:
                end += 1
            remaining = len(workers) - wi - 1
            end = max(min(end, n - remaining), start + 1)
        runs.append((w, tuple(range(start, end))))
        start = end
    return tuple(runs)


def _hill_climb(stages, fleet: Fleet, runs: Runs, include_comm, rounds=200) -> Runs:
    """Shift run boundaries while the exact makespan improves."""

    def score(cand: Runs):
        if verify_assignment(stages, fleet, cand):
            return math.inf
        peer_of = {i: pe for pe, idxs in cand for i in idxs}
        return max(sum(_run_cost(stages, fleet, peer_of, pe, idxs, include_comm))
                   for pe, idxs in cand if idxs)

    cur = tuple(runs)
    cur_score = score(cur)
    for _ in range(rounds):
        improved = False
        active = [k for k, (_, idxs) in enumerate(cur) if idxs]
        for a, b in zip(active, active[1:]):
            for direction in (+1, -1):
                pa, ia = cur[a]
                pb, ib = cur[b]
                if direction > 0 and len(ia) > 1:
                    na, nb = ia[:-1], (ia[-1],) + ib
                elif direction < 0 and len(ib) > 1:
                    na, nb = ia + (ib[0],), ib[1:]
                else:
                    continue
                cand = list(cur)
                cand[a] = (pa, na)
                cand[b] = (pb, nb)
                cand_score = score(tuple(cand))
                if cand_score < cur_score - 1e-15:
                    cur, cur_score = tuple(cand), cand_score
                    improved = True
        if not improved:
            break
    return cur


def schedule(stages: Sequence[Stage], fleet: Fleet, *,
             include_comm: bool = True) -> ScheduleReport:
    """Assign stages to the fleet's workers, minimizing the makespan."""
    stages = list(stages)
    workers = fleet.worker_ids()
    _check_inputs(stages, workers)
    n, p = len(stages), len(workers)

    if fleet.pinned_runs is not None:
        if len(fleet.pinned_runs) > p:
            raise SchedulingError(f"{len(fleet.pinned_runs)} pinned runs but only "
                                  f"{p} workers")
        runs = tuple((workers[k], tuple(run)) for k, run in enumerate(fleet.pinned_runs))
        return _evaluate(stages, fleet, runs, include_comm, ("pinned runs",))

    if n * n * p * (2 ** p) <= 3_000_000:
        runs = _subset_dp(stages, fleet, workers, include_comm)
        if runs is None:
            report = _evaluate(stages, fleet, ((workers[0], tuple(range(n))),),
                               include_comm, ("exact search: no feasible assignment",))
            return _mark_infeasible(report, "no feasible assignment under memory constraints")
        if fleet.links:
            runs = _hill_climb(stages, fleet, runs, include_comm)
        return _evaluate(stages, fleet, runs, include_comm, ("exact subset search",))

    runs = _proportional_runs(stages, fleet, workers)
    runs = _hill_climb(stages, fleet, runs, include_comm)
    report = _evaluate(stages, fleet, runs, include_comm,
                       ("proportional split with boundary search",))
    if not report.feasible:
        return _mark_infeasible(report, report.reason or
                                "no feasible assignment under memory constraints")
    return report


def _mark_infeasible(report: ScheduleReport, reason: str) -> ScheduleReport:
    return ScheduleReport(report.stages, report.runs, report.per_peer,
                          math.inf, False, reason, report.include_comm, report.trace)


def reschedule_on_failure(report: ScheduleReport, failed_peer: str,
                          fleet: Fleet) -> ScheduleReport:
    """Replace a failed peer's run with a backup, or re-solve without it.

    Every stage keeps an owner afterwards; like-for-like replacement picks
    the backup giving the smallest new makespan, lowest peer id on ties.
    """
    failed_peer = str(failed_peer)
    stages = report.stages
    lost = tuple(idxs for peer, idxs in report.runs if peer == failed_peer)
    if not lost:
        return report
    survivors = {pid: p for pid, p in fleet.peers.items() if pid != failed_peer}
    assigned = {peer for peer, idxs in report.runs if idxs and peer != failed_peer}

    candidates = [b for b in fleet.backup_pool
                  if b != failed_peer and b in survivors and b not in assigned]
    scored = []
    for backup in sorted(candidates, key=ir.peer_sort_key):
        runs = tuple((backup if peer == failed_peer else peer, idxs)
                     for peer, idxs in report.runs)
        cand = _evaluate(stages, fleet, runs, report.include_comm,
                         report.trace + (f"replaced {failed_peer} with {backup}",))
        if cand.feasible:
            scored.append((cand.makespan, ir.peer_sort_key(backup), cand))
    if scored:
        scored.sort(key=lambda t: (t[0], t[1]))
        return scored[0][2]

    reduced = Fleet(peers=survivors, default_link=fleet.default_link,
                    links={k: v for k, v in fleet.links.items()
                           if failed_peer not in k},
                    backup_pool=(), msg_ratio=fleet.msg_ratio,
                    pinned_runs=None, name=fleet.name)
    if not reduced.peers:
        raise SchedulingError("no surviving peers to reschedule onto")
    solved = schedule(stages, reduced, include_comm=report.include_comm)
    if not solved.feasible:
        raise SchedulingError(f"no feasible recovery after losing {failed_peer}: "
                              f"{solved.reason}")
    return ScheduleReport(solved.stages, solved.runs, solved.per_peer,
                          solved.makespan, True, "",
                          solved.include_comm,
                          report.trace + (f"re-solved without {failed_peer}",))
