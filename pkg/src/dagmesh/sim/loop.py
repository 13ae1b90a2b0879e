"""Discrete-event simulation of a placed job running on a fleet.

Time advances through a priority queue of events ordered by (time, kind
rank, sequence number), so simultaneous events resolve the same way on
every run. Peers compute one thing at a time; each directed link carries
one message at a time, FIFO, taking alpha + beta * bytes per message.
Control traffic (pings, dispatches, checkpoint bookkeeping) is instant.

A broker pings every assigned peer once per interval. A peer that stops
answering is considered failed one timeout after its first missed ping;
the broker then swaps in a backup (or re-solves the schedule), rolls every
peer back to the newest step for which all operator checkpoints exist,
and resumes from the following batch. Work from before the rollback is
fenced off by an epoch counter and discarded on arrival.

Training serializes batches: updates for batch b land before batch b+1
starts. Inference streams all batches through the pipeline at once.
"""

from __future__ import annotations

import csv
import heapq
import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Sequence

from .. import ir, reference, scheduling
from ..errors import SimulationError
from ..hardware import Fleet, comm_time, effective_speed, message_bytes
from .dht import DhtStore
from .executor import PeerRuntime

BROKER = "broker"


class EventKind(Enum):
    JOIN = "join"
    QUIT = "quit"
    PING = "ping"
    PONG = "pong"
    DISPATCH = "dispatch"
    MSG_SEND = "msg_send"
    MSG_ARRIVE = "msg_arrive"
    COMPUTE_DONE = "compute_done"
    CHECKPOINT_SYNC = "checkpoint_sync"


RANK = {kind: i for i, kind in enumerate(EventKind)}


@dataclass(frozen=True)
class LoggedEvent:
    time_s: float
    kind: EventKind
    src: str
    dst: str
    detail: str


def events_to_csv(events: Sequence[LoggedEvent], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "kind", "src", "dst", "detail"])
        for e in events:
            w.writerow([f"{e.time_s:.9f}", e.kind.value, e.src, e.dst, e.detail])


@dataclass(frozen=True)
class ScenarioEvent:
    time_s: float
    action: str  # "join" or "quit"
    peer_id: str


def parse_scenario(doc) -> list[ScenarioEvent]:
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise SimulationError(f"scenario is not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise SimulationError("scenario must be a list of events")
    out = []
    for entry in doc:
        try:
            action = str(entry["action"])
            out.append(ScenarioEvent(float(entry["time_s"]), action,
                                     str(entry["peer_id"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SimulationError(f"bad scenario entry {entry!r}: {exc}") from exc
        if action not in ("join", "quit"):
            raise SimulationError(f"unknown scenario action {action!r}")
    return sorted(out, key=lambda e: e.time_s)


def load_scenario(path) -> list[ScenarioEvent]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def default_scenario(fleet: Fleet) -> list[ScenarioEvent]:
    return [ScenarioEvent(0.0, "join", pid) for pid in fleet.peer_ids()]


@dataclass(frozen=True)
class SimConfig:
    n_batches: int = 1
    seed: int = 0
    mode: str | None = None           # "train", "inference", or None for auto
    replication: int = 2
    checkpoint_interval: int = 1
    ping_interval: float = 1.0
    ping_timeout: float = 3.0
    max_events: int = 2_000_000
    data_spec: dict | None = None     # None falls back to job meta
    optimizer: dict | None = None


@dataclass
class SimReport:
    status: str
    mode: str
    n_batches: int
    events: tuple[LoggedEvent, ...]
    batch_done: dict[int, float]
    losses: list[float] | None
    final_params: reference.Params
    stats: dict[str, int]
    end_time: float
    schedule: scheduling.ScheduleReport
    placement: dict[str, str]


def _ordered_cells(graph: ir.Graph,
                   groups: dict[str, list[str]]) -> list[list[str]]:
    """Order per-peer cells so every cross-cell data edge points forward.

    Placeholder inputs come from the data layer, not from the producing
    cell, so they impose no ordering.
    """
    owner = {n: peer for peer, names in groups.items() for n in names}
    deps: dict[str, set[str]] = {peer: set() for peer in groups}
    for name in graph.topo_order:
        node = graph.node(name)
        for a in node.args:
            if graph.node(a).kind is ir.OpKind.PLACEHOLDER:
                continue
            if owner[a] != owner[name]:
                deps[owner[name]].add(owner[a])
    first = {peer: min(graph.topo_index(n) for n in names)
             for peer, names in groups.items()}
    done: set[str] = set()
    order: list[str] = []
    while deps:
        ready = sorted((p for p, ds in deps.items() if ds <= done),
                       key=lambda p: first[p])
        if not ready:
            raise SimulationError("placement makes peers depend on each other "
                                  "in a cycle; it cannot run as a pipeline")
        pick = ready[0]
        order.append(pick)
        done.add(pick)
        del deps[pick]
    return [groups[p] for p in order]


def placement_report(graph: ir.Graph, fleet: Fleet,
                     placement: Mapping[str, str]) -> tuple[scheduling.ScheduleReport,
                                                            list[list[str]]]:
    """Score a node-to-peer map as a one-stage-per-peer schedule."""
    owners = {str(n): str(p) for n, p in placement.items()}
    missing = [n for n in graph.nodes if n not in owners]
    if missing:
        raise SimulationError(f"placement misses nodes {missing}")
    unknown = [n for n in owners if n not in graph]
    if unknown:
        raise SimulationError(f"placement names unknown nodes {unknown}")
    for peer in owners.values():
        fleet.peer(peer)  # raises on unknown peers
    groups: dict[str, list[str]] = {}
    for name in graph.topo_order:
        groups.setdefault(owners[name], []).append(name)
    cells = _ordered_cells(graph, groups)
    stages = scheduling.build_stages(graph, cells)
    runs = tuple((owners[cell[0]], (i,)) for i, cell in enumerate(cells))
    report = scheduling.evaluate_runs(stages, fleet, runs,
                                      trace=("from placement",))
    if not report.feasible:
        raise SimulationError(f"placement is infeasible: {report.reason}")
    return report, cells


def placement_from_cells(cells: Sequence[Sequence[str]],
                         report: scheduling.ScheduleReport) -> dict[str, str]:
    stage_owner = report.assignment
    out = {}
    for idx, cell in enumerate(cells):
        for name in cell:
            out[name] = stage_owner[idx]
    return out


class _LinkState:
    __slots__ = ("busy_until",)

    def __init__(self):
        self.busy_until = 0.0


class _Sim:
    def __init__(self, graph: ir.Graph, fleet: Fleet,
                 placement: Mapping[str, str], scenario, config: SimConfig):
        self.graph = graph
        self.fleet = fleet
        self.config = config
        self.report, self.cells = placement_report(graph, fleet, placement)
        self.placement = {str(n): str(p) for n, p in placement.items()}

        losses_present = bool(graph.loss_nodes())
        self.mode = config.mode or ("train" if losses_present else "inference")
        if self.mode not in ("train", "inference"):
            raise SimulationError(f"unknown mode {self.mode!r}")
        if self.mode == "train":
            if not losses_present:
                raise SimulationError("training a job with no loss node")
            self.optimizer = reference.optimizer_settings(graph, config.optimizer)
        else:
            self.optimizer = None
        self.data_spec = (config.data_spec if config.data_spec is not None
                          else graph.meta.get("data"))
        if config.n_batches < 1:
            raise SimulationError(f"need at least one batch, got {config.n_batches}")

        self.participants = graph.backward_participants()
        self.update_ops = tuple(
            n for n in graph.topo_order
            if ir.param_shapes(graph.node(n)) and n in self.participants)
        self.sinks = tuple(n for n in graph.topo_order if not graph.node(n).users)

        self.scenario = (default_scenario(fleet) if scenario is None
                         else list(scenario))

        # event machinery
        self.heap: list = []
        self.seq = 0
        self.log: list[LoggedEvent] = []
        self.stats: dict[str, int] = {}
        self.now = 0.0
        self.epoch = 0
        self.finished = False

        # peers and links
        self.online: set[str] = set()
        self.dht = DhtStore(config.replication)
        self.runtimes: dict[str, PeerRuntime] = {}
        self.busy_until: dict[str, float] = {}
        self.inflight: set[tuple[str, int, str, int]] = set()
        self.links: dict[tuple[str, str], _LinkState] = {}

        # progress bookkeeping
        self.batch_done: dict[int, float] = {}
        self.losses_by_batch: dict[int, float] = {}
        self.loss_parts: dict[int, dict[str, float]] = {}
        self.remaining: dict[int, int] = {}
        self.ckpt_steps: dict[str, int] = {}
        self.first_miss: dict[str, float] = {}
        self.handled_failures: set[str] = set()
        self.dispatch_countdown = 0
        self.msgs_inflight = 0
        if config.checkpoint_interval < 1:
            raise SimulationError("checkpoint interval must be at least 1")

    # ------------------------------------------------------------- utilities

    def _push(self, time: float, kind: EventKind, data: dict) -> None:
        heapq.heappush(self.heap, (time, RANK[kind], self.seq, kind, data))
        self.seq += 1

    def _log(self, kind: EventKind, src: str, dst: str, detail: str) -> None:
        self.log.append(LoggedEvent(self.now, kind, src, dst, detail))
        self.stats[kind.value] = self.stats.get(kind.value, 0) + 1

    def _assigned_peers(self) -> tuple[str, ...]:
        return tuple(p for p, idxs in self.report.runs if idxs)

    def _stage_label(self, peer: str) -> str:
        for p, idxs in self.report.runs:
            if p == peer:
                return scheduling.format_stage_run(idxs)
        return ""

    def _ckpt_key(self, op: str, step: int) -> str:
        return f"ckpt/{op}/{step}"

    # -------------------------------------------------------------- lifecycle

    def run(self) -> SimReport:
        for ev in self.scenario:
            self._push(ev.time_s, EventKind.JOIN if ev.action == "join"
                       else EventKind.QUIT, {"peer": ev.peer_id})
        self._push(0.0, EventKind.PING, {"tick": True})
        self._prepare_dispatch()

        handled = 0
        while self.heap and not self.finished:
            self.now, _, _, kind, data = heapq.heappop(self.heap)
            handled += 1
            if handled > self.config.max_events:
                raise SimulationError("event budget exceeded; the run is stuck",
                                      report=self._partial("stuck"))
            self._dispatch_event(kind, data)
        if not self.finished:
            raise SimulationError("event queue drained before the job finished",
                                  report=self._partial("deadlock"))
        return self._partial("completed")

    def _dispatch_event(self, kind: EventKind, data: dict) -> None:
        handler = {
            EventKind.JOIN: self._on_join,
            EventKind.QUIT: self._on_quit,
            EventKind.PING: self._on_ping_tick,
            EventKind.DISPATCH: self._on_dispatch,
            EventKind.MSG_SEND: self._on_msg_send,
            EventKind.MSG_ARRIVE: self._on_msg_arrive,
            EventKind.COMPUTE_DONE: self._on_compute_done,
        }[kind]
        handler(data)

    def _prepare_dispatch(self) -> None:
        self.dispatch_countdown = len(self._assigned_peers())
        for peer in self._assigned_peers():
            self._push(0.0, EventKind.DISPATCH,
                       {"peer": peer, "detail": "initial", "epoch": 0})

    def _build_runtimes(self) -> None:
        full = reference.init_params(self.graph, self.config.seed)
        owners: dict[str, list[str]] = {}
        for name, peer in self.placement.items():
            owners.setdefault(peer, []).append(name)
        self.runtimes = {
            peer: PeerRuntime(peer, self.graph, names, full, self.data_spec,
                              self.config.seed)
            for peer, names in owners.items()}
        self.busy_until = {peer: self.now for peer in self.runtimes}

    # ----------------------------------------------------------- member flow

    def _on_join(self, data: dict) -> None:
        peer = data["peer"]
        if peer not in self.fleet.peers:
            raise SimulationError(f"scenario joins unknown peer {peer!r}")
        self.dht.join(peer)
        self.online.add(peer)
        self._log(EventKind.JOIN, peer, BROKER, "online")

    def _on_quit(self, data: dict) -> None:
        peer = data["peer"]
        if peer not in self.online:
            raise SimulationError(f"scenario quits peer {peer!r} which is not "
                                  f"online at t={self.now:g}")
        self.online.discard(peer)
        lost = self.dht.leave(peer)
        self._log(EventKind.QUIT, peer, BROKER, "offline")
        if lost:
            raise SimulationError(
                f"checkpoint data lost when {peer} left: {', '.join(lost)}",
                report=self._partial("data_lost"))

    def _on_ping_tick(self, data: dict) -> None:
        if self.finished:
            return
        for peer in self._assigned_peers():
            self._log(EventKind.PING, BROKER, peer, "")
            if peer in self.online:
                self._log(EventKind.PONG, peer, BROKER, "")
                self.first_miss.pop(peer, None)
            else:
                self.first_miss.setdefault(peer, self.now)
        deadline_hit = [p for p, t0 in sorted(self.first_miss.items())
                        if self.now >= t0 + self.config.ping_timeout
                        and p not in self.handled_failures]
        for peer in deadline_hit:
            self.handled_failures.add(peer)
            self.first_miss.pop(peer, None)
            self.stats["detections"] = self.stats.get("detections", 0) + 1
            self._recover(peer)
        self._deadlock_check()
        if not self.finished:
            self._push(self.now + self.config.ping_interval, EventKind.PING,
                       {"tick": True})

    def _deadlock_check(self) -> None:
        """Nothing queued, nothing in flight, nobody missing: stuck for good."""
        if (self.finished or self.dispatch_countdown > 0 or self.inflight
                or self.msgs_inflight > 0 or self.first_miss):
            return
        for peer in sorted(self.runtimes, key=ir.peer_sort_key):
            self._kick(peer)
        if not self.inflight:
            raise SimulationError("simulation deadlocked: peers idle with work "
                                  "left and no data in flight",
                                  report=self._partial("deadlock"))

    def _on_dispatch(self, data: dict) -> None:
        peer = data["peer"]
        if not self.online:
            raise SimulationError("no peers joined the session; nothing can run")
        if peer not in self.online:
            raise SimulationError(f"peer {peer} holds stages but is not online "
                                  f"at dispatch")
        self._log(EventKind.DISPATCH, BROKER, peer,
                  f"stages {self._stage_label(peer)} {data['detail']}")
        self.dispatch_countdown -= 1
        if self.dispatch_countdown == 0:
            self._build_runtimes()
            self._start_batches(0)

    def _start_batches(self, first_batch: int) -> None:
        if first_batch >= self.config.n_batches:
            self._finish()
            return
        batches = ([first_batch] if self.mode == "train"
                   else range(first_batch, self.config.n_batches))
        for b in batches:
            self.remaining[b] = (len(self.update_ops) if self.mode == "train"
                                 else len(self.sinks))
            if self.mode == "train":
                self.loss_parts[b] = {}
            for peer in sorted(self.runtimes, key=ir.peer_sort_key):
                self.runtimes[peer].start_batch(b)
        for peer in sorted(self.runtimes, key=ir.peer_sort_key):
            self._kick(peer)

    def _finish(self) -> None:
        self.finished = True

    # ------------------------------------------------------------ peer work

    def _kick(self, peer: str) -> None:
        """Start the peer's next ready task if it is idle."""
        if (self.finished or peer not in self.runtimes
                or peer not in self.online
                or self.busy_until.get(peer, 0.0) > self.now):
            return
        rt = self.runtimes[peer]
        best = None
        for batch in sorted(self.remaining):
            if self.remaining[batch] <= 0:
                continue
            for name in rt.fp_candidates(batch):
                key = (batch, 0, self.graph.topo_index(name), name)
                if (peer, batch, name, 0) not in self.inflight:
                    best = key if best is None or key < best else best
            if self.mode == "train":
                for name in rt.bp_candidates(batch):
                    key = (batch, 1,
                           len(self.graph.nodes) - self.graph.topo_index(name),
                           name)
                    if (peer, batch, name, 1) not in self.inflight:
                        best = key if best is None or key < best else best
            if best is not None:
                break  # earlier batches first; keeps the line FIFO
        if best is None:
            return
        batch, phase, _, name = best
        node = self.graph.node(name)
        flops = ir.op_flops(node)
        duration = flops / effective_speed(self.fleet.peer(peer))
        if phase == 1:
            duration *= 2.0  # backward walks the same math twice over
        self.inflight.add((peer, batch, name, phase))
        self.busy_until[peer] = self.now + duration
        self._push(self.now + duration, EventKind.COMPUTE_DONE,
                   {"peer": peer, "batch": batch, "name": name, "phase": phase,
                    "epoch": self.epoch})

    def _on_compute_done(self, data: dict) -> None:
        peer, batch, name = data["peer"], data["batch"], data["name"]
        phase = data["phase"]
        self.inflight.discard((peer, batch, name, phase))
        tag = f"{'fp' if phase == 0 else 'bp'} {name} b{batch}"
        if data["epoch"] != self.epoch:
            self.stats["discarded"] = self.stats.get("discarded", 0) + 1
            return
        if peer not in self.online or peer not in self.runtimes:
            self.stats["discarded"] = self.stats.get("discarded", 0) + 1
            return
        self.busy_until[peer] = self.now
        rt = self.runtimes[peer]
        if phase == 0:
            value = rt.run_fp(batch, name)
            self._log(EventKind.COMPUTE_DONE, peer, peer, tag)
            self._route_value(peer, batch, name, value)
            if self.mode == "train" and name in self.graph.loss_nodes():
                self._note_loss(batch, name, float(value))
            if self.mode == "inference" and name in self.sinks:
                self._note_sink(batch)
        else:
            param_grads, per_arg = rt.run_bp(batch, name)
            self._log(EventKind.COMPUTE_DONE, peer, peer, tag)
            for a in self._grad_targets(name, per_arg):
                self._route_grad(peer, batch, name, a, per_arg[a])
            if param_grads and name in self.update_ops:
                rt.apply_update(name, param_grads, self.optimizer)
                self._maybe_checkpoint(peer, name, batch)
                self._note_update(batch)
        self._kick(peer)

    def _grad_targets(self, name: str, per_arg: dict) -> list[str]:
        node = self.graph.node(name)
        seen, ordered = set(), []
        for a in node.args:
            if a in per_arg and a not in seen:
                seen.add(a)
                ordered.append(a)
        return ordered

    def _note_loss(self, batch: int, name: str, value: float) -> None:
        parts = self.loss_parts[batch]
        parts[name] = value
        losses = self.graph.loss_nodes()
        if len(parts) == len(losses):
            self.losses_by_batch[batch] = float(sum(parts[n] for n in losses))

    def _note_sink(self, batch: int) -> None:
        self.remaining[batch] -= 1
        if self.remaining[batch] == 0:
            del self.remaining[batch]
            self.batch_done[batch] = self.now
            if len(self.batch_done) == self.config.n_batches:
                self._finish()

    def _note_update(self, batch: int) -> None:
        self.remaining[batch] -= 1
        if self.remaining[batch] > 0:
            return
        del self.remaining[batch]
        self.batch_done[batch] = self.now
        self._gc_checkpoints()
        if batch + 1 < self.config.n_batches:
            self._start_batches(batch + 1)
        else:
            self._finish()

    # ------------------------------------------------------------- messaging

    def _route_value(self, src_peer: str, batch: int, name: str, value) -> None:
        node = self.graph.node(name)
        remote = []
        for user in node.users:
            dst = self.placement[user]
            if dst != src_peer and dst not in remote:
                remote.append(dst)
        for dst in remote:
            self._send(src_peer, dst, {"kind": "value", "batch": batch,
                                       "name": name, "value": value},
                       message_bytes(node, self.fleet.msg_ratio),
                       f"{name} b{batch}")

    def _route_grad(self, src_peer: str, batch: int, user: str, arg: str,
                    grad) -> None:
        dst = self.placement[arg]
        payload = {"kind": "grad", "batch": batch, "name": arg,
                   "src_user": user, "value": grad}
        if dst == src_peer:
            self.runtimes[dst].receive_grad(batch, arg, user, grad)
            return
        self._send(src_peer, dst, payload,
                   message_bytes(self.graph.node(arg), self.fleet.msg_ratio),
                   f"grad {arg} from {user} b{batch}")

    def _send(self, src: str, dst: str, payload: dict, nbytes: int,
              label: str) -> None:
        self._log(EventKind.MSG_SEND, src, dst, f"{label} ({nbytes} B)")
        state = self.links.setdefault((src, dst), _LinkState())
        start = max(self.now, state.busy_until)
        arrive = start + comm_time(self.fleet.link_between(src, dst), nbytes)
        state.busy_until = arrive
        self.msgs_inflight += 1
        payload = dict(payload, epoch=self.epoch, label=label, src=src, dst=dst)
        self._push(arrive, EventKind.MSG_ARRIVE, payload)

    def _on_msg_arrive(self, data: dict) -> None:
        src, dst, label = data["src"], data["dst"], data["label"]
        self.msgs_inflight -= 1
        if data["epoch"] != self.epoch:
            self.stats["discarded"] = self.stats.get("discarded", 0) + 1
            self._log(EventKind.MSG_ARRIVE, src, dst, f"{label} [stale]")
            return
        if dst not in self.online or dst not in self.runtimes:
            self.stats["discarded"] = self.stats.get("discarded", 0) + 1
            self._log(EventKind.MSG_ARRIVE, src, dst, f"{label} [peer offline]")
            return
        self._log(EventKind.MSG_ARRIVE, src, dst, label)
        rt = self.runtimes[dst]
        if data["kind"] == "value":
            rt.receive_value(data["batch"], data["name"], data["value"])
        else:
            rt.receive_grad(data["batch"], data["name"], data["src_user"],
                            data["value"])
        self._kick(dst)

    def _on_msg_send(self, data: dict) -> None:  # pragma: no cover
        raise SimulationError("send events are logged, never queued")

    # ----------------------------------------------------------- checkpoints

    def _maybe_checkpoint(self, peer: str, name: str, step: int) -> None:
        if self.mode != "train":
            return
        if (step + 1) % self.config.checkpoint_interval != 0:
            return
        blob = self.runtimes[peer].checkpoint_bytes(name)
        holders = self.dht.put(self._ckpt_key(name, step), blob)
        self.ckpt_steps[name] = step
        self._log(EventKind.CHECKPOINT_SYNC, peer,
                  holders[0] if holders else peer,
                  f"{name} step {step} on {','.join(holders)}")

    def _gc_checkpoints(self) -> None:
        """Drop superseded checkpoints once a newer full set exists."""
        if not self.update_ops:
            return
        common = min((self.ckpt_steps.get(op, -1) for op in self.update_ops),
                     default=-1)
        if common < 0:
            return
        for key in self.dht.keys():
            step = int(key.rsplit("/", 1)[1])
            if step < common:
                self.dht.delete(key)

    # -------------------------------------------------------------- recovery

    def _recover(self, failed: str) -> None:
        if failed not in {p for p, idxs in self.report.runs if idxs}:
            return  # an idle peer went away; nothing to move
        view = self._online_view()
        try:
            new_report = scheduling.reschedule_on_failure(self.report, failed, view)
        except scheduling.SchedulingError as exc:
            raise SimulationError(f"no feasible recovery after losing {failed}: "
                                  f"{exc}", report=self._partial("unrecoverable"))
        old_owner = self.report.assignment
        self.report = new_report
        self.placement = placement_from_cells(self.cells, new_report)
        self.epoch += 1
        self.inflight.clear()
        self.stats["replacements"] = self.stats.get("replacements", 0) + 1

        step = min((self.ckpt_steps.get(op, -1) for op in self.update_ops),
                   default=-1)
        self._build_runtimes()
        if step >= 0:
            for op in self.update_ops:
                blob = self.dht.get(self._ckpt_key(op, step))
                if blob is None:
                    raise SimulationError(
                        f"checkpoint for {op} step {step} is gone",
                        report=self._partial("data_lost"))
                self.runtimes[self.placement[op]].load_checkpoint(op, blob)

        # every later batch is rolled back, finished or not
        for b in list(self.batch_done):
            if b > step:
                del self.batch_done[b]
        for b in list(self.losses_by_batch):
            if b > step:
                del self.losses_by_batch[b]
        self.loss_parts.clear()
        self.remaining.clear()

        new_owner = self.report.assignment
        for stage_idx in sorted(new_owner):
            if new_owner[stage_idx] != old_owner.get(stage_idx):
                peer = new_owner[stage_idx]
                self._log(EventKind.DISPATCH, BROKER, peer,
                          f"stages {self._stage_label(peer)} replacement "
                          f"for {failed}")
        self._start_batches(step + 1)

    def _online_view(self) -> Fleet:
        peers = {pid: p for pid, p in self.fleet.peers.items()
                 if pid in self.online}
        return replace(self.fleet,
                       peers=peers,
                       links={k: v for k, v in self.fleet.links.items()
                              if k[0] in peers and k[1] in peers},
                       backup_pool=tuple(b for b in self.fleet.backup_pool
                                         if b in peers),
                       pinned_runs=None)

    # ---------------------------------------------------------------- report

    def _partial(self, status: str) -> SimReport:
        losses = None
        if self.mode == "train":
            losses = [self.losses_by_batch[b]
                      for b in sorted(self.losses_by_batch)]
        final: reference.Params = {}
        for peer in sorted(self.runtimes, key=ir.peer_sort_key):
            for op, slot in self.runtimes[peer].params.items():
                final[op] = dict(slot)
        return SimReport(status=status, mode=self.mode,
                         n_batches=self.config.n_batches,
                         events=tuple(self.log),
                         batch_done=dict(self.batch_done),
                         losses=losses, final_params=final,
                         stats=dict(self.stats), end_time=self.now,
                         schedule=self.report, placement=dict(self.placement))


def run_simulation(graph: ir.Graph, fleet: Fleet,
                   placement: Mapping[str, str] | None = None,
                   scenario: Sequence[ScenarioEvent] | None = None,
                   config: SimConfig | None = None) -> SimReport:
    """Simulate a job on a fleet; returns the event log and final state.

    The placement defaults to the one written in the job file. A scenario
    of None means every fleet peer joins at time zero; an explicit empty
    list means nobody ever joins, which is an error once dispatch comes.
    """
    config = config or SimConfig()
    if placement is None:
        placement = graph.placement
        if not placement:
            raise SimulationError("no placement given and the job carries none")
    return _Sim(graph, fleet, placement, scenario, config).run()
