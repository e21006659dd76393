"""Directed acyclic layer graphs with a forward/backward executor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from deepseg.nn.layers import Layer, RunContext


class GraphError(ValueError):
    pass


@dataclass
class Node:
    id: int
    layer: Layer | None  # None marks the graph input
    inputs: tuple[int, ...]
    tag: str = ""


@dataclass
class Trace:
    """Activations and per-node caches recorded by one forward pass."""

    outputs: dict[int, np.ndarray]
    caches: dict[int, object]


class Graph:
    """Nodes are stored in insertion order, which is always a topological order."""

    def __init__(self):
        self.nodes: list[Node] = [Node(0, None, (), "input")]
        self.output_id = 0

    @property
    def input_id(self) -> int:
        return 0

    def add(self, layer: Layer, *inputs: int, tag: str = "") -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"node input {i} does not exist (graph has {len(self.nodes)} nodes)")
        if layer.arity > 0 and len(inputs) != layer.arity:
            raise GraphError(f"{layer!r} takes {layer.arity} inputs, got {len(inputs)}")
        node = Node(len(self.nodes), layer, tuple(inputs), tag)
        self.nodes.append(node)
        self.output_id = node.id
        return node.id

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def layers(self):
        return [n for n in self.nodes if n.layer is not None]

    def edges(self) -> list[tuple[int, int]]:
        return [(src, n.id) for n in self.nodes for src in n.inputs]

    def check(self) -> None:
        """Assert acyclicity (inputs precede nodes) and reachability from the input."""
        reached = {0}
        for n in self.nodes[1:]:
            if any(i >= n.id for i in n.inputs):
                raise GraphError(f"node {n.id} consumes a later node; graph is not topologically ordered")
            if any(i in reached for i in n.inputs):
                reached.add(n.id)
        missing = [n.id for n in self.nodes if n.id not in reached]
        if missing:
            raise GraphError(f"nodes {missing} are unreachable from the input")

    # -- parameters -------------------------------------------------------

    def parameters(self):
        """Trainable arrays as ((node_id, name), array) in graph order."""
        return [((n.id, k), v) for n in self.layers() for k, v in n.layer.params.items()]

    def state_arrays(self):
        """Parameters plus non-trainable buffers (running statistics), in graph order."""
        out = []
        for n in self.layers():
            out += [((n.id, k), v) for k, v in n.layer.params.items()]
            out += [((n.id, k), v) for k, v in n.layer.buffers.items()]
        return out

    # -- execution --------------------------------------------------------

    def forward(self, x: np.ndarray, ctx: RunContext | None = None, stop_at: int | None = None):
        ctx = ctx or RunContext()
        stop = self.output_id if stop_at is None else stop_at
        outputs = {0: x}
        caches = {}
        for n in self.nodes[1 : stop + 1]:
            y, cache = n.layer.forward([outputs[i] for i in n.inputs], ctx, n.id)
            outputs[n.id] = y
            caches[n.id] = cache
        return outputs[stop], Trace(outputs, caches)

    def backward(self, trace: Trace, grad: np.ndarray, seed_node: int | None = None):
        """Backpropagate ``grad`` injected at the output of ``seed_node``.

        Returns (grad_input, param_grads) where param_grads maps
        (node_id, name) to an array shaped like the parameter.
        """
        seed = self.output_id if seed_node is None else seed_node
        pending = {seed: grad}
        param_grads = {}
        for n in reversed(self.nodes[1 : seed + 1]):
            g = pending.pop(n.id, None)
            if g is None:
                continue
            in_grads, p_grads = n.layer.backward(g, trace.caches[n.id])
            for k, v in p_grads.items():
                param_grads[(n.id, k)] = v
            for src, gi in zip(n.inputs, in_grads):
                if gi is None:
                    continue
                pending[src] = gi if src not in pending else pending[src] + gi
        grad_in = pending.get(0)
        if grad_in is None:
            grad_in = np.zeros_like(trace.outputs[0])
        for (nid, k), v in self.parameters():
            if (nid, k) not in param_grads and nid <= seed:
                param_grads[(nid, k)] = np.zeros_like(v)
        return grad_in, param_grads


@dataclass
class Subgraph:
    """A block inside a (possibly larger) graph: its entry and exit node ids."""

    graph: Graph
    input_id: int
    output_id: int
    node_ids: list[int]
    in_channels: int
    out_channels: int
    meta: dict = field(default_factory=dict)

    def nodes(self):
        return [self.graph.node(i) for i in self.node_ids]

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes() if n.layer.kind == kind)
