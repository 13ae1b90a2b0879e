"""Analytic performance model: peers, links, op timing, memory footprints.

Per-operator time decomposes into a read term (fetching inputs produced on
other peers), a compute term (FLOPs over the peer's effective speed) and a
write term (shipping the output out, zero when every consumer is local or
the write bandwidth is unbounded). A link moves a message of M bytes in
alpha + beta * M seconds. A peer's effective speed is its peak FLOP rate
scaled by an efficiency factor lambda in (0, 1], which can be fitted from
measured (flops, seconds) samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

from . import ir, ops
from .errors import FleetError

# accounting granularity for tensors on the wire and in device memory (fp32);
# the numeric executor itself runs float64 for reproducible gradient checks
ELEMENT_BYTES = 4


@dataclass(frozen=True)
class GpuSpec:
    tflops_fp32: float
    tflops_tensor: float
    memory_gb: float


# peak rates as published per card: plain fp32 pipeline and tensor cores
GPU_TABLE: dict[str, GpuSpec] = {
    "rtx4090": GpuSpec(82.58, 82.58, 24),
    "rtx4080": GpuSpec(48.74, 97.5, 16),
    "rtx3080": GpuSpec(29.77, 59.5, 10),
    "h100": GpuSpec(51.22, 756.0, 80),
    "a100": GpuSpec(19.49, 155.92, 80),
}

COMPUTE_COLUMNS = ("fp32", "tensor")


def gpu_peak_flops(spec: GpuSpec, compute_column: str = "tensor") -> float:
    if compute_column not in COMPUTE_COLUMNS:
        raise FleetError(f"compute column must be one of {COMPUTE_COLUMNS}")
    return getattr(spec, f"tflops_{compute_column}") * 1e12


class Role(Enum):
    SUPERNODE = "supernode"
    ANTNODE = "antnode"


@dataclass(frozen=True)
class Peer:
    """One worker with its capability profile and capacity limits."""

    id: str
    role: Role = Role.ANTNODE
    peak_flops: float = 1e12          # FLOP/s before the efficiency factor
    lam: float = 1.0                  # efficiency in (0, 1]
    gpu_bytes: float = 8 * 2**30
    cpu_bytes: float = 16 * 2**30
    disk_bytes: float = 64 * 2**30
    write_bandwidth: float = math.inf  # bytes/s for the write term

    def __post_init__(self):
        if self.peak_flops <= 0:
            raise FleetError(f"peer {self.id}: peak_flops must be positive")
        if not (0.0 < self.lam <= 1.0):
            raise FleetError(f"peer {self.id}: lambda must lie in (0, 1], got {self.lam}")
        if min(self.gpu_bytes, self.cpu_bytes, self.disk_bytes) < 0:
            raise FleetError(f"peer {self.id}: capacities must be nonnegative")
        if self.write_bandwidth <= 0:
            raise FleetError(f"peer {self.id}: write_bandwidth must be positive")


@dataclass(frozen=True)
class Link:
    """Affine transfer cost: alpha seconds of latency plus beta per byte."""

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise FleetError("link alpha and beta must be nonnegative")


ZERO_LINK = Link(0.0, 0.0)


def bandwidth_to_beta(gbps: float) -> float:
    if gbps <= 0:
        raise FleetError("bandwidth must be positive")
    return 8.0 / (gbps * 1e9)


@dataclass
class Fleet:
    """A set of peers, their links and scheduling hints from the fleet file."""

    peers: dict[str, Peer]
    default_link: Link = ZERO_LINK
    links: dict[tuple[str, str], Link] = field(default_factory=dict)
    backup_pool: tuple[str, ...] = ()
    msg_ratio: float = 1.0            # scalar knob shrinking message sizes
    pinned_runs: tuple[tuple[int, ...], ...] | None = None
    name: str = "fleet"

    def __post_init__(self):
        for pid in self.backup_pool:
            if pid not in self.peers:
                raise FleetError(f"backup pool references unknown peer {pid!r}")
        if self.msg_ratio <= 0:
            raise FleetError("msg_ratio must be positive")

    def peer(self, pid: str) -> Peer:
        try:
            return self.peers[str(pid)]
        except KeyError:
            raise FleetError(f"unknown peer {pid!r}") from None

    def peer_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.peers, key=ir.peer_sort_key))

    def worker_ids(self) -> tuple[str, ...]:
        """Peers the scheduler may assign work to; backups are held in reserve."""
        reserve = set(self.backup_pool)
        return tuple(p for p in self.peer_ids() if p not in reserve)

    def link_between(self, a: str, b: str) -> Link:
        a, b = str(a), str(b)
        if a == b:
            return ZERO_LINK
        return self.links.get((a, b)) or self.links.get((b, a)) or self.default_link

    def with_default_link(self, link: Link) -> "Fleet":
        """Copy of the fleet with one uniform link everywhere (grid sweeps)."""
        return replace(self, default_link=link, links={})


def comm_time(link: Link, message_bytes: float) -> float:
    if message_bytes < 0:
        raise FleetError("message size must be nonnegative")
    return link.alpha + link.beta * message_bytes


def effective_speed(peer: Peer) -> float:
    return peer.peak_flops * peer.lam


def message_bytes(node: ir.OpNode, msg_ratio: float = 1.0) -> int:
    return int(round(node.out_elements * ELEMENT_BYTES * msg_ratio))


def fit_lambda(samples: Sequence[tuple[float, float]], peer: Peer) -> float:
    """Fit the efficiency factor from measured (flops, seconds) pairs.

    Least squares through the origin of time against flops gives the slope
    1 / (peak * lambda); the result is clamped into (0, 1].
    """
    pts = [(float(f), float(t)) for f, t in samples]
    if not pts:
        raise FleetError("lambda fit needs at least one sample")
    if any(t <= 0 for _, t in pts):
        raise FleetError("lambda fit needs positive measured times")
    sxx = sum(f * f for f, _ in pts)
    sxy = sum(f * t for f, t in pts)
    if sxx == 0 or sxy == 0:
        raise FleetError("lambda fit is degenerate: all samples have zero flops")
    lam = sxx / (peer.peak_flops * sxy)
    return min(lam, 1.0)


class OpCost(NamedTuple):
    read_s: float
    compute_s: float
    write_s: float

    @property
    def total_s(self) -> float:
        return self.read_s + self.compute_s + self.write_s


def op_time(graph: ir.Graph, name: str, fleet: Fleet,
            placement: Mapping[str, str]) -> OpCost:
    """Read/compute/write cost of one node under a placement map."""
    node = graph.node(name)
    me = str(placement[name])
    peer = fleet.peer(me)
    read = 0.0
    for a in node.args:
        src = str(placement[a])
        if src != me:
            m = message_bytes(graph.node(a), fleet.msg_ratio)
            read += comm_time(fleet.link_between(src, me), m)
    compute = op_flops_cost(node, peer)
    write = 0.0
    if any(str(placement[u]) != me for u in node.users):
        write = message_bytes(node, fleet.msg_ratio) / peer.write_bandwidth
    return OpCost(read, compute, write)


def op_flops_cost(node: ir.OpNode, peer: Peer) -> float:
    return ir.op_flops(node) / effective_speed(peer)


class SubgraphTime(NamedTuple):
    lower_s: float      # parallel bound: slowest single op
    upper_s: float      # serial bound, equal to sequential_s
    sequential_s: float


def subgraph_time(graph: ir.Graph, nodes: Iterable[str], fleet: Fleet,
                  placement: Mapping[str, str]) -> SubgraphTime:
    """Time range for one peer's cell: [max over ops, sum over ops]."""
    totals = [op_time(graph, n, fleet, placement).total_s for n in nodes]
    if not totals:
        return SubgraphTime(0.0, 0.0, 0.0)
    seq = sum(totals)
    return SubgraphTime(max(totals), seq, seq)


class MemoryFootprint(NamedTuple):
    gpu_bytes: int
    cpu_bytes: int
    disk_bytes: int


def memory_footprint(graph: ir.Graph, nodes: Iterable[str]) -> MemoryFootprint:
    """Capacity demand of a cell for one micro-batch.

    Device memory holds parameters plus activations, where each node accounts
    for its output and the inputs it keeps around for the backward pass. Host
    memory holds the serialized cell description and a parameter copy; disk
    holds the parameter checkpoint.
    """
    names = list(nodes)
    params = 0
    activations = 0
    desc_rows = []
    for name in names:
        node = graph.node(name)
        params += ir.param_elements(node)
        activations += node.out_elements + sum(ops.elements(s) for s in node.in_shapes)
        desc_rows.append({"name": node.name, "type": node.kind.value,
                          "op_class": node.op_class, "args": list(node.args),
                          "users": list(node.users), "kwargs": dict(node.kwargs),
                          "shape": list(node.out_shape)})
    desc_bytes = len(json.dumps(desc_rows, sort_keys=True).encode("utf-8")) if names else 0
    gpu = ELEMENT_BYTES * (params + activations)
    cpu = desc_bytes + ELEMENT_BYTES * params
    disk = ELEMENT_BYTES * params
    return MemoryFootprint(gpu, cpu, disk)


# ---------------------------------------------------------------- fleet file


def _peer_from_entry(entry: dict, compute_column: str) -> Peer:
    if "id" not in entry:
        raise FleetError(f"peer entry without id: {entry!r}")
    pid = str(entry["id"])
    spec = None
    if "gpu" in entry:
        key = str(entry["gpu"]).lower()
        if key not in GPU_TABLE:
            raise FleetError(f"peer {pid}: unknown gpu {entry['gpu']!r}")
        spec = GPU_TABLE[key]
    if compute_column not in COMPUTE_COLUMNS:
        raise FleetError(f"compute column must be one of {COMPUTE_COLUMNS}")
    tflops_key = f"tflops_{compute_column}"
    if tflops_key in entry:
        tflops = float(entry[tflops_key])
    elif spec is not None:
        tflops = getattr(spec, tflops_key)
    else:
        raise FleetError(f"peer {pid}: needs {tflops_key} or a gpu model")
    gpu_gb = float(entry.get("gpu_gb", spec.memory_gb if spec else 8.0))
    role = Role(str(entry.get("role", "antnode")).lower())
    return Peer(
        id=pid,
        role=role,
        peak_flops=tflops * 1e12,
        lam=float(entry.get("lambda", 1.0)),
        gpu_bytes=gpu_gb * 2**30,
        cpu_bytes=float(entry.get("cpu_gb", 16.0)) * 2**30,
        disk_bytes=float(entry.get("disk_gb", 64.0)) * 2**30,
        write_bandwidth=float(entry.get("write_bandwidth_bytes_per_s", math.inf)),
    )


def _link_from_entry(entry: dict) -> Link:
    alpha = float(entry.get("alpha_s", entry.get("default_alpha_s", 0.0)))
    if "beta_s_per_byte" in entry:
        beta = float(entry["beta_s_per_byte"])
    elif "bandwidth_gbps" in entry:
        beta = bandwidth_to_beta(float(entry["bandwidth_gbps"]))
    elif "default_beta_bytes_per_s" in entry:
        # bandwidth given directly in bytes per second
        bps = float(entry["default_beta_bytes_per_s"])
        if bps <= 0:
            raise FleetError("default_beta_bytes_per_s must be positive")
        beta = 1.0 / bps
    else:
        beta = 0.0
    return Link(alpha, beta)


def parse_fleet(doc: dict | str, compute_column: str = "tensor") -> Fleet:
    """Build a Fleet from a fleet file document (JSON text or dict)."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise FleetError(f"fleet file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("peers"), list):
        raise FleetError('fleet file must be an object with a "peers" list')
    peers = {}
    for entry in doc["peers"]:
        peer = _peer_from_entry(entry, compute_column)
        if peer.id in peers:
            raise FleetError(f"duplicate peer id {peer.id!r}")
        peers[peer.id] = peer

    links_doc = doc.get("links") or {}
    default_link = _link_from_entry(links_doc)
    overrides = {}
    for entry in links_doc.get("overrides", []):
        src, dst = str(entry["src"]), str(entry["dst"])
        for end in (src, dst):
            if end not in peers:
                raise FleetError(f"link override references unknown peer {end!r}")
        overrides[(src, dst)] = _link_from_entry(entry)

    pinned = doc.get("pinned_runs")
    if pinned is not None:
        # stage indices are 1-based in the file, 0-based in memory
        pinned = tuple(tuple(int(s) - 1 for s in run) for run in pinned)

    return Fleet(
        peers=peers,
        default_link=default_link,
        links=overrides,
        backup_pool=tuple(str(p) for p in doc.get("backup_pool", [])),
        msg_ratio=float(doc.get("msg_ratio", 1.0)),
        pinned_runs=pinned,
        name=str(doc.get("name", "fleet")),
    )


def load_fleet(path, compute_column: str = "tensor") -> Fleet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_fleet(fh.read(), compute_column)
