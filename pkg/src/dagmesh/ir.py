"""Operator graph IR: job parsing, validation, backward view, decomposition.

A job definition is a JSON document listing the operator nodes of a
computational DAG. Each node mirrors one table row of the wire format:

    {"name": ..., "type": ..., "op_class": ..., "args": [...],
     "kwargs": {...}, "users": [...], "shape": [...]}

plus a "meta" object (batch size, data generation, optimizer settings) and
an optional "placement" map from node name to peer id. Edges are stored
redundantly on both endpoints (args on the consumer, users on the producer)
and the two views are checked against each other at parse time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from . import ops
from .errors import JobError

Shape = tuple[int, ...]


class OpKind(Enum):
    PLACEHOLDER = "placeholder"
    VARIABLE = "variable"
    PARAMETRIC = "parametric"
    NON_PARAMETRIC = "non_parametric"
    LOSS = "loss"


_KIND_ALIASES = {
    "placeholder": OpKind.PLACEHOLDER,
    "variable": OpKind.VARIABLE,
    "parametric": OpKind.PARAMETRIC,
    "parametricop": OpKind.PARAMETRIC,
    "nonparametric": OpKind.NON_PARAMETRIC,
    "nonparametricop": OpKind.NON_PARAMETRIC,
    "loss": OpKind.LOSS,
    "lossfunction": OpKind.LOSS,
}

# kinds that are leaves of the forward graph: they take no args
LEAF_KINDS = (OpKind.PLACEHOLDER, OpKind.VARIABLE)


def parse_kind(text: str) -> OpKind:
    key = "".join(ch for ch in str(text).lower() if ch.isalnum())
    try:
        return _KIND_ALIASES[key]
    except KeyError:
        raise JobError(f"unknown node type {text!r}") from None


@dataclass(frozen=True)
class OpNode:
    """One operator in the DAG, with resolved shapes."""

    name: str
    kind: OpKind
    op_class: str | None
    args: tuple[str, ...]
    users: tuple[str, ...]
    kwargs: dict
    in_shapes: tuple[Shape, ...]
    out_shape: Shape

    @property
    def out_elements(self) -> int:
        return ops.elements(self.out_shape)


def op_flops(node: OpNode) -> int:
    """Forward FLOPs of one node for a single micro-batch."""
    if node.kind in LEAF_KINDS:
        return 0
    return int(ops.opdef(node.op_class).flops(node.in_shapes, node.kwargs))


def param_shapes(node: OpNode) -> dict[str, Shape]:
    """Trainable parameter shapes held by the node, if any."""
    if node.kind is OpKind.VARIABLE:
        return {"value": node.out_shape}
    if node.kind in (OpKind.PARAMETRIC, OpKind.NON_PARAMETRIC, OpKind.LOSS):
        return dict(ops.opdef(node.op_class).param_shapes(node.in_shapes, node.kwargs))
    return {}


def param_elements(node: OpNode) -> int:
    return sum(ops.elements(s) for s in param_shapes(node).values())


class Graph:
    """Validated operator DAG with deterministic topological order."""

    def __init__(self, nodes: Mapping[str, OpNode], meta: dict | None = None,
                 placement: dict[str, str] | None = None):
        self.nodes: dict[str, OpNode] = dict(nodes)
        self.meta: dict = dict(meta or {})
        self.placement: dict[str, str] | None = placement
        self.topo_order: tuple[str, ...] = _topological_order(self.nodes)
        self._topo_index = {n: i for i, n in enumerate(self.topo_order)}

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, name):
        return name in self.nodes

    def __eq__(self, other):
        return (isinstance(other, Graph) and self.nodes == other.nodes
                and self.meta == other.meta and self.placement == other.placement)

    def node(self, name: str) -> OpNode:
        try:
            return self.nodes[name]
        except KeyError:
            raise JobError(f"unknown node {name!r}") from None

    def topo_index(self, name: str) -> int:
        return self._topo_index[name]

    def loss_nodes(self) -> tuple[str, ...]:
        return tuple(n for n in self.topo_order if self.nodes[n].kind is OpKind.LOSS)

    def trainable_nodes(self) -> tuple[str, ...]:
        return tuple(n for n in self.topo_order
                     if self.nodes[n].kind in (OpKind.PARAMETRIC, OpKind.VARIABLE))

    def backward_participants(self) -> frozenset[str]:
        """Nodes whose outputs ultimately feed a loss node."""
        hit = set(self.loss_nodes())
        for name in reversed(self.topo_order):
            if any(u in hit for u in self.nodes[name].users):
                hit.add(name)
        return frozenset(hit)

    def to_job_dict(self) -> dict:
        rows = []
        for name in self.nodes:  # preserve authoring order
            n = self.nodes[name]
            row = {"name": n.name, "type": n.kind.value, "op_class": n.op_class,
                   "args": list(n.args), "kwargs": dict(n.kwargs),
                   "users": list(n.users), "shape": list(n.out_shape)}
            rows.append(row)
        doc = {"meta": dict(self.meta), "nodes": rows}
        if self.placement is not None:
            doc["placement"] = dict(self.placement)
        return doc


def _topological_order(nodes: Mapping[str, OpNode]) -> tuple[str, ...]:
    """Kahn's algorithm; ties are broken by node name so the order is stable."""
    import heapq

    indeg = {n: len(nodes[n].args) for n in nodes}
    ready = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        name = heapq.heappop(ready)
        order.append(name)
        for user in nodes[name].users:
            indeg[user] -= 1
            if indeg[user] == 0:
                heapq.heappush(ready, user)
    if len(order) != len(nodes):
        cycle = _find_cycle(nodes, set(nodes) - set(order))
        raise JobError("cycle detected: " + " -> ".join(cycle))
    return tuple(order)


def _find_cycle(nodes, unresolved):
    start = min(unresolved)
    path, seen = [start], {start}
    cur = start
    while True:
        nxt = min(u for u in nodes[cur].users if u in unresolved)
        if nxt in seen:
            return path[path.index(nxt):] + [nxt]
        path.append(nxt)
        seen.add(nxt)
        cur = nxt


def _as_name_list(value, where) -> tuple[str, ...]:
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise JobError(f"{where}: expected a list of node names, got {value!r}")
    return tuple(value)


def parse_job_definition(text: str | dict) -> Graph:
    """Parse and validate a job definition given as JSON text or a dict."""
    if isinstance(text, str):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise JobError(f"job file is not valid JSON: {exc}") from exc
    else:
        doc = text
    if not isinstance(doc, dict) or not isinstance(doc.get("nodes"), list):
        raise JobError('job file must be an object with a "nodes" list')

    rows = doc["nodes"]
    raw: dict[str, dict] = {}
    for row in rows:
        if not isinstance(row, dict) or not isinstance(row.get("name"), str):
            raise JobError(f"node entries need a string name: {row!r}")
        name = row["name"]
        if name in raw:
            raise JobError(f"duplicate node name {name!r}")
        raw[name] = row

    # structural pass before shapes: references, edge symmetry, kinds
    parsed = {}
    for name, row in raw.items():
        kind = parse_kind(row.get("type", ""))
        args = _as_name_list(row.get("args"), f"{name}.args")
        users = _as_name_list(row.get("users"), f"{name}.users")
        kwargs = row.get("kwargs") or {}
        if not isinstance(kwargs, dict):
            raise JobError(f"{name}.kwargs must be an object")
        for k, v in kwargs.items():
            if not isinstance(v, (int, float, str, bool)):
                raise JobError(f"{name}.kwargs[{k}] must be a scalar")
        for ref in args + users:
            if ref not in raw:
                raise JobError(f"{name} references unknown node {ref!r}")
        if len(set(args)) != len(args) or len(set(users)) != len(users):
            raise JobError(f"{name}: duplicate entries in args or users")
        if kind in LEAF_KINDS:
            if args:
                raise JobError(f"{name} is a {kind.value} and must not take args")
            if row.get("op_class"):
                raise JobError(f"{name} is a {kind.value} and must not set op_class")
            if not row.get("shape"):
                raise JobError(f"{name} is a {kind.value} and needs an explicit shape")
        else:
            if not args:
                raise JobError(f"{name} must take at least one arg")
            if not row.get("op_class"):
                raise JobError(f"{name} needs an op_class")
        parsed[name] = (kind, args, users, kwargs, row)

    for name, (kind, args, users, kwargs, row) in parsed.items():
        for a in args:
            if name not in parsed[a][2]:
                raise JobError(f"edge inconsistency: {name} lists arg {a!r} "
                               f"but {a} does not list {name} as user")
        for u in users:
            if name not in parsed[u][1]:
                raise JobError(f"edge inconsistency: {name} lists user {u!r} "
                               f"but {u} does not list {name} as arg")
        if kind is OpKind.LOSS and users:
            raise JobError(f"loss node {name} must be a sink, has users {list(users)}")

    # shape pass in dependency order
    order = _topological_order({
        name: OpNode(name, k, None, a, u, {}, (), ()) for name, (k, a, u, _, _) in parsed.items()
    })
    nodes: dict[str, OpNode] = {}
    shapes: dict[str, Shape] = {}
    for name in order:
        kind, args, users, kwargs, row = parsed[name]
        declared = tuple(int(d) for d in row["shape"]) if row.get("shape") else None
        if kind in LEAF_KINDS:
            in_shapes: tuple[Shape, ...] = ()
            out_shape = declared
        else:
            in_shapes = tuple(shapes[a] for a in args)
            out_shape = ops.opdef(row["op_class"]).infer_shape(in_shapes, kwargs)
            if declared is not None and declared != out_shape:
                raise JobError(f"{name}: declared shape {declared} does not match "
                               f"inferred {out_shape}")
        shapes[name] = out_shape
        nodes[name] = OpNode(name, kind, row.get("op_class"), args, users,
                             dict(kwargs), in_shapes, out_shape)
        if kind is OpKind.LOSS and out_shape != ():
            raise JobError(f"loss node {name} must produce a scalar, got {out_shape}")

    # keep authoring order for serialization round trips
    ordered = {name: nodes[name] for name in raw}
    placement = doc.get("placement")
    if placement is not None:
        if not isinstance(placement, dict):
            raise JobError('"placement" must map node names to peer ids')
        placement = {str(k): str(v) for k, v in placement.items()}
        for key in placement:
            if key not in ordered:
                raise JobError(f"placement references unknown node {key!r}")
    meta = doc.get("meta") or {}
    if not isinstance(meta, dict):
        raise JobError('"meta" must be an object')
    return Graph(ordered, meta=meta, placement=placement)


def load_job(path) -> Graph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_job_definition(fh.read())


def derive_backward_view(g: Graph) -> dict[str, tuple[str, ...]]:
    """Gradient-flow adjacency: node -> args that receive a gradient from it.

    Edges are the reverse of the forward edges, except that nothing flows
    into a placeholder (externally fed leaves take no gradient).
    """
    view = {}
    for name in g.topo_order:
        node = g.nodes[name]
        view[name] = tuple(a for a in node.args
                           if g.nodes[a].kind is not OpKind.PLACEHOLDER)
    return view


@dataclass(frozen=True)
class SubGraph:
    """The cell of the DAG owned by one peer, with its data-flow summary.

    outer_required lists what the peer must obtain from outside the cell:
    outputs of nodes placed on other peers, plus the cell's own placeholders,
    whose values arrive from a data provider. inner_required lists local
    nodes whose outputs some other local node consumes. outwards lists local
    nodes whose outputs leave the cell, and compnode_users the peers that
    consume them.
    """

    id: int
    peer: str
    nodes: tuple[str, ...]
    inner_required: tuple[str, ...]
    outer_required: tuple[str, ...]
    outwards: tuple[str, ...]
    compnode_users: tuple[str, ...]


def peer_sort_key(peer_id: str):
    s = str(peer_id)
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


def decompose(g: Graph, assignment: Mapping[str, str],
              peers: Iterable[str] | None = None) -> list[SubGraph]:
    """Split the graph into per-peer sub-graphs under a placement map."""
    assignment = {str(k): str(v) for k, v in assignment.items()}
    missing = [n for n in g.nodes if n not in assignment]
    if missing:
        raise JobError(f"placement does not cover nodes {missing}")
    unknown = [n for n in assignment if n not in g.nodes]
    if unknown:
        raise JobError(f"placement references unknown nodes {unknown}")
    if peers is not None:
        valid = {str(p) for p in peers}
        bad = sorted({p for p in assignment.values() if p not in valid})
        if bad:
            raise JobError(f"placement references unknown peers {bad}")

    by_peer: dict[str, list[str]] = {}
    for name in g.topo_order:
        by_peer.setdefault(assignment[name], []).append(name)

    cells = []
    for idx, peer in enumerate(sorted(by_peer, key=peer_sort_key), start=1):
        local = by_peer[peer]
        local_set = set(local)
        inner, outer, outwards, consumers = [], [], [], set()
        for name in local:
            node = g.nodes[name]
            if node.kind is OpKind.PLACEHOLDER:
                outer.append(name)  # fed from outside by the data provider
            for a in node.args:
                if a not in local_set and a not in outer:
                    outer.append(a)
            if any(u in local_set for u in node.users):
                inner.append(name)
            external = [u for u in node.users if u not in local_set]
            if external:
                outwards.append(name)
                consumers.update(assignment[u] for u in external)
        cells.append(SubGraph(
            id=idx, peer=peer, nodes=tuple(local),
            inner_required=tuple(inner), outer_required=tuple(outer),
            outwards=tuple(outwards),
            compnode_users=tuple(sorted(consumers, key=peer_sort_key)),
        ))
    return cells
