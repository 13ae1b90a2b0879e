"""Single-host execution of a job: the numerical ground truth.

The distributed runtime must produce the same floats, so everything
nondeterministic is pinned down here and shared:

- parameters come from a stream seeded by (seed, name of op, name of param),
- each placeholder batch from (seed, name of placeholder, batch index),
- gradient contributions into a node are summed in the order the node's
  users list declares, never in arrival order.

All math runs in float64.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import ir, ops
from .errors import JobError

Params = dict[str, dict[str, np.ndarray]]
Grads = dict[str, dict[str, np.ndarray]]

INIT_SCALE = 0.1


def _stream(*parts) -> np.random.Generator:
    """Generator seeded by mixed integers and strings, order sensitive."""
    seq = [p if isinstance(p, int) else zlib.crc32(str(p).encode("utf-8"))
           for p in parts]
    return np.random.default_rng(seq)


def init_params(graph: ir.Graph, seed: int) -> Params:
    params: Params = {}
    for name in graph.topo_order:
        node = graph.node(name)
        shapes = ir.param_shapes(node)
        if not shapes:
            continue
        params[name] = {}
        for pname in sorted(shapes):
            rng = _stream(seed, f"{name}/{pname}")
            params[name][pname] = INIT_SCALE * rng.standard_normal(shapes[pname])
    return params


def _data_kind(spec: dict | None, name: str) -> tuple[str, dict]:
    spec = spec or {}
    entry = (spec.get("per_node") or {}).get(name, spec.get("default", "normal"))
    if isinstance(entry, str):
        return entry, {}
    if isinstance(entry, dict) and "kind" in entry:
        return str(entry["kind"]), {k: v for k, v in entry.items() if k != "kind"}
    raise JobError(f"bad data spec for {name!r}: {entry!r}")


def _ids_high(graph: ir.Graph, node: ir.OpNode, opts: dict) -> int:
    if "high" in opts:
        return int(opts["high"])
    for user in node.users:
        u = graph.node(user)
        if u.op_class == "embedding":
            return int(u.kwargs["num_embeddings"])
    return 2


def placeholder_batch(graph: ir.Graph, name: str, data_spec: dict | None,
                      seed: int, batch_index: int) -> np.ndarray:
    node = graph.node(name)
    if node.kind is not ir.OpKind.PLACEHOLDER:
        raise JobError(f"{name!r} is not a placeholder")
    kind, opts = _data_kind(data_spec, name)
    shape = node.out_shape
    if kind == "ones":
        return np.ones(shape, dtype=np.float64)
    if kind == "ramp":
        n = max(ops.elements(shape), 1)
        return (np.arange(n, dtype=np.float64) / n).reshape(shape)
    rng = _stream(seed, name, batch_index)
    if kind == "normal":
        return rng.standard_normal(shape)
    if kind == "onehot":
        if len(shape) != 2:
            raise JobError(f"onehot data needs a rank-2 placeholder, {name!r} "
                           f"has shape {shape}")
        rows, classes = shape
        picks = rng.integers(0, classes, size=rows)
        out = np.zeros(shape, dtype=np.float64)
        out[np.arange(rows), picks] = 1.0
        return out
    if kind == "ids":
        high = _ids_high(graph, node, opts)
        return rng.integers(0, high, size=shape).astype(np.float64)
    raise JobError(f"unknown data kind {kind!r} for {name!r}")


def batch_inputs(graph: ir.Graph, data_spec: dict | None, seed: int,
                 batch_index: int) -> dict[str, np.ndarray]:
    return {name: placeholder_batch(graph, name, data_spec, seed, batch_index)
            for name in graph.topo_order
            if graph.node(name).kind is ir.OpKind.PLACEHOLDER}


# -------------------------------------------------------------------- forward


def forward_pass(graph: ir.Graph, params: Params,
                 inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    values: dict[str, np.ndarray] = {}
    for name in graph.topo_order:
        node = graph.node(name)
        if node.kind is ir.OpKind.PLACEHOLDER:
            if name not in inputs:
                raise JobError(f"missing input for placeholder {name!r}")
            values[name] = np.asarray(inputs[name], dtype=np.float64)
        elif node.kind is ir.OpKind.VARIABLE:
            values[name] = params[name]["value"]
        else:
            op = ops.opdef(node.op_class)
            values[name] = op.forward([values[a] for a in node.args],
                                      params.get(name, {}), node.kwargs)
    return values


# ------------------------------------------------------------------- backward


def grad_flows_to(op_class: str, arg_index: int) -> bool:
    """Whether an op propagates a gradient to a given argument slot."""
    return (op_class, arg_index) not in ops.NO_ARG_GRAD


def grad_sources(graph: ir.Graph, name: str,
                 participants: frozenset[str]) -> tuple[str, ...]:
    """Users that will contribute a gradient to `name`, in users order."""
    node = graph.node(name)
    out = []
    for user in node.users:
        if user not in participants:
            continue
        u = graph.node(user)
        if any(a == name and grad_flows_to(u.op_class, i)
               for i, a in enumerate(u.args)):
            out.append(user)
    return tuple(out)


def combine_contributions(sources: tuple[str, ...],
                          contrib: dict[str, np.ndarray]) -> np.ndarray | None:
    """Sum contributions strictly in users-list order.

    Summation order is part of the contract: floats are not associative and
    the distributed runtime must add in this same order to match bitwise.
    """
    total = None
    for src in sources:
        g = contrib[src]
        total = g.copy() if total is None else total + g
    return total


def backward_pass(graph: ir.Graph, params: Params,
                  values: dict[str, np.ndarray]) -> Grads:
    participants = frozenset(graph.backward_participants())
    losses = graph.loss_nodes()
    if not losses:
        raise JobError("job has no loss node; nothing to train")
    contrib: dict[str, dict[str, np.ndarray]] = {n: {} for n in graph.nodes}
    grads: Grads = {}
    one = np.asarray(1.0, dtype=np.float64)

    for name in reversed(graph.topo_order):
        node = graph.node(name)
        if name not in participants or node.kind is ir.OpKind.PLACEHOLDER:
            continue
        if name in losses:
            grad_out = one
        else:
            sources = grad_sources(graph, name, participants)
            grad_out = combine_contributions(sources, contrib[name])
            if grad_out is None:
                continue
        if node.kind is ir.OpKind.VARIABLE:
            grads[name] = {"value": grad_out}
            continue
        op = ops.opdef(node.op_class)
        arg_values = [values[a] for a in node.args]
        arg_grads, param_grads = op.backward(arg_values, params.get(name, {}),
                                             values[name], grad_out, node.kwargs)
        if param_grads:
            grads[name] = param_grads
        per_arg: dict[str, np.ndarray] = {}
        for i, a in enumerate(node.args):
            g = arg_grads[i]
            if g is None or graph.node(a).kind is ir.OpKind.PLACEHOLDER:
                continue
            # the same node may feed two argument slots; fold them first
            per_arg[a] = g if a not in per_arg else per_arg[a] + g
        for a, g in per_arg.items():
            contrib[a][name] = g
    return grads


# --------------------------------------------------------------------- update


def optimizer_settings(graph: ir.Graph, override: dict | None = None) -> dict:
    opt = override if override is not None else graph.meta.get("optimizer")
    if not isinstance(opt, dict) or "kind" not in opt:
        raise JobError("missing optimizer config: meta.optimizer needs a kind")
    if opt["kind"] != "sgd":
        raise JobError(f"unknown optimizer kind {opt['kind']!r}")
    if "lr" not in opt:
        raise JobError("missing optimizer config: sgd needs an lr")
    return opt


def sgd_update(params: Params, grads: Grads, optimizer: dict) -> None:
    base_lr = float(optimizer["lr"])
    per_op = optimizer.get("per_op") or {}
    for name, pgrads in grads.items():
        lr = float(per_op.get(name, {}).get("lr", base_lr))
        for pname, g in pgrads.items():
            params[name][pname] = params[name][pname] - lr * g


# -------------------------------------------------------------- whole batches


def loss_value(graph: ir.Graph, values: dict[str, np.ndarray]) -> float:
    return float(sum(values[n] for n in graph.loss_nodes()))


def centralized_train(graph: ir.Graph, n_batches: int, seed: int = 0,
                      data_spec: dict | None = None,
                      optimizer: dict | None = None) -> tuple[Params, list[float]]:
    """Train on one host for n_batches; returns final params and loss curve."""
    if n_batches < 1:
        raise JobError(f"need at least one batch, got {n_batches}")
    opt = optimizer_settings(graph, optimizer)
    spec = data_spec if data_spec is not None else graph.meta.get("data")
    params = init_params(graph, seed)
    losses = []
    for b in range(n_batches):
        inputs = batch_inputs(graph, spec, seed, b)
        values = forward_pass(graph, params, inputs)
        losses.append(loss_value(graph, values))
        grads = backward_pass(graph, params, values)
        sgd_update(params, grads, opt)
    return params, losses
