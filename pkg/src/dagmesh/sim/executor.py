"""Per-peer execution state for the runtime simulation.

A PeerRuntime holds one peer's slice of the job: its nodes, their
parameters, and per-batch values and gradient contributions. The event
loop decides when things run and where messages go; this module does the
math, reusing the single-host kernels so both paths produce the same
floats. Gradient contributions are summed in users-list order at fire
time, not in arrival order.
"""

from __future__ import annotations

import io

import numpy as np

from .. import ir, ops, reference
from ..errors import SimulationError


class PeerRuntime:
    def __init__(self, peer_id: str, graph: ir.Graph, local_nodes,
                 full_params: reference.Params, data_spec: dict | None,
                 seed: int):
        self.peer_id = str(peer_id)
        self.graph = graph
        unknown = [n for n in local_nodes if n not in graph]
        if unknown:
            raise SimulationError(f"peer {peer_id}: unknown nodes {unknown}")
        self.local = tuple(sorted(local_nodes, key=graph.topo_index))
        self.data_spec = data_spec
        self.seed = seed
        self.participants = graph.backward_participants()
        self.params: reference.Params = {
            n: dict(full_params[n]) for n in self.local if n in full_params}
        # per-batch state
        self.values: dict[tuple[int, str], np.ndarray] = {}
        self.contrib: dict[tuple[int, str], dict[str, np.ndarray]] = {}
        self.fired_fp: set[tuple[int, str]] = set()
        self.fired_bp: set[tuple[int, str]] = set()
        self._sources = {n: reference.grad_sources(graph, n, self.participants)
                         for n in graph.nodes}

    # ---------------------------------------------------------------- intake

    def start_batch(self, batch: int) -> None:
        """Materialize leaf values this peer needs; data arrives out of band."""
        needed = set()
        for name in self.local:
            node = self.graph.node(name)
            if node.kind is ir.OpKind.PLACEHOLDER:
                needed.add(name)
            for a in node.args:
                if self.graph.node(a).kind is ir.OpKind.PLACEHOLDER:
                    needed.add(a)
        for name in sorted(needed, key=self.graph.topo_index):
            self.values[(batch, name)] = reference.placeholder_batch(
                self.graph, name, self.data_spec, self.seed, batch)
        for name in self.local:
            node = self.graph.node(name)
            if node.kind is ir.OpKind.PLACEHOLDER:
                self.fired_fp.add((batch, name))
            elif node.kind is ir.OpKind.VARIABLE:
                self.values[(batch, name)] = self.params[name]["value"]
                self.fired_fp.add((batch, name))

    def receive_value(self, batch: int, name: str, value: np.ndarray) -> None:
        self.values[(batch, name)] = value

    def receive_grad(self, batch: int, name: str, src_user: str,
                     grad: np.ndarray) -> None:
        self.contrib.setdefault((batch, name), {})[src_user] = grad

    # --------------------------------------------------------------- forward

    def fp_candidates(self, batch: int) -> list[str]:
        out = []
        for name in self.local:
            node = self.graph.node(name)
            if node.kind in ir.LEAF_KINDS or (batch, name) in self.fired_fp:
                continue
            if all((batch, a) in self.values for a in node.args):
                out.append(name)
        return out

    def run_fp(self, batch: int, name: str) -> np.ndarray:
        node = self.graph.node(name)
        op = ops.opdef(node.op_class)
        value = op.forward([self.values[(batch, a)] for a in node.args],
                           self.params.get(name, {}), node.kwargs)
        self.values[(batch, name)] = value
        self.fired_fp.add((batch, name))
        return value

    # -------------------------------------------------------------- backward

    def bp_candidates(self, batch: int) -> list[str]:
        losses = set(self.graph.loss_nodes())
        out = []
        for name in reversed(self.local):
            node = self.graph.node(name)
            if (name not in self.participants
                    or node.kind is ir.OpKind.PLACEHOLDER
                    or (batch, name) in self.fired_bp):
                continue
            if name in losses:
                if (batch, name) in self.fired_fp:
                    out.append(name)
                continue
            if (batch, name) not in self.fired_fp:
                continue
            got = self.contrib.get((batch, name), {})
            if all(src in got for src in self._sources[name]):
                out.append(name)
        return out

    def run_bp(self, batch: int, name: str):
        """Fire a node's backward; returns (param grads, grads per argument)."""
        node = self.graph.node(name)
        if name in self.graph.loss_nodes():
            grad_out = np.asarray(1.0, dtype=np.float64)
        else:
            got = self.contrib.get((batch, name), {})
            missing = [s for s in self._sources[name] if s not in got]
            if missing:
                raise SimulationError(f"backward of {name!r} fired before "
                                      f"gradients from {missing} arrived")
            grad_out = reference.combine_contributions(self._sources[name], got)
            if grad_out is None:
                raise SimulationError(f"backward of {name!r} fired with no "
                                      f"gradient contributions")
        self.fired_bp.add((batch, name))
        if node.kind is ir.OpKind.VARIABLE:
            return {"value": grad_out}, {}
        op = ops.opdef(node.op_class)
        arg_values = [self.values[(batch, a)] for a in node.args]
        arg_grads, param_grads = op.backward(arg_values, self.params.get(name, {}),
                                             self.values[(batch, name)], grad_out,
                                             node.kwargs)
        per_arg: dict[str, np.ndarray] = {}
        for i, a in enumerate(node.args):
            g = arg_grads[i]
            if g is None or self.graph.node(a).kind is ir.OpKind.PLACEHOLDER:
                continue
            per_arg[a] = g if a not in per_arg else per_arg[a] + g
        return param_grads, per_arg

    def store_local_grad(self, batch: int, name: str, src_user: str,
                         grad: np.ndarray) -> None:
        self.receive_grad(batch, name, src_user, grad)

    # ---------------------------------------------------------------- update

    def apply_update(self, name: str, grads: dict[str, np.ndarray],
                     optimizer: dict) -> None:
        reference.sgd_update({name: self.params[name]}, {name: grads}, optimizer)

    def checkpoint_bytes(self, name: str) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **self.params[name])
        return buf.getvalue()

    def load_checkpoint(self, name: str, blob: bytes) -> None:
        with np.load(io.BytesIO(blob)) as archive:
            self.params[name] = {k: archive[k] for k in archive.files}
