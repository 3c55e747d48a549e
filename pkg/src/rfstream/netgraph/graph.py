"""Model graph structure and its on-disk form.

A model is a pair of files: ``name.ngraph.json`` describes the nodes and
``name.ngraph.bin`` holds every weight block as little-endian float32,
concatenated. Weighted nodes carry ``weights_offset`` and ``weights_len``
(counted in float32 elements) in their params; a block is the kernel in
``(kh, kw, cin, cout)`` order followed by the ``cout`` bias values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import GraphError

OPS = ("Input", "Conv2D", "TransposedConv2D", "Pool", "Activation", "ConcatChannels", "Add")
ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
WEIGHTED = ("Conv2D", "TransposedConv2D")
FORMAT_VERSION = 1


def pair(value):
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise GraphError(f"expected a pair, got {value!r}")
        return int(value[0]), int(value[1])
    return int(value), int(value)


@dataclass
class Node:
    id: str
    op: str
    params: dict = field(default_factory=dict)
    inputs: tuple = ()
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def kernel(self):
        return pair(self.params["window" if self.op == "Pool" else "kernel"])

    def stride(self):
        return pair(self.params.get("stride", 1))


def _check_node(node: Node):
    op, p = node.op, node.params
    if op not in OPS:
        raise GraphError(f"node {node.id!r}: unknown op {op!r}")
    if op == "Input":
        if node.inputs:
            raise GraphError(f"node {node.id!r}: Input takes no inputs")
        if int(p.get("channels", 0)) < 1:
            raise GraphError(f"node {node.id!r}: Input needs a positive channel count")
        return
    if op in ("ConcatChannels", "Add"):
        if not node.inputs:
            raise GraphError(f"node {node.id!r}: {op} needs at least one input")
    elif len(node.inputs) != 1:
        raise GraphError(f"node {node.id!r}: {op} takes exactly one input")
    if op == "Activation" and p.get("fn") not in ACTIVATIONS:
        raise GraphError(f"node {node.id!r}: activation must be one of {ACTIVATIONS}")
    if op == "Pool":
        if p.get("mode") not in ("max", "avg"):
            raise GraphError(f"node {node.id!r}: pool mode must be max or avg")
        if min(node.kernel() + node.stride()) < 1:
            raise GraphError(f"node {node.id!r}: pool window and stride must be positive")
    if op in WEIGHTED:
        kh, kw = node.kernel()
        if min(kh, kw, *node.stride()) < 1:
            raise GraphError(f"node {node.id!r}: kernel and stride must be positive")
        if op == "Conv2D" and p.get("padding", "valid") not in ("valid", "same"):
            raise GraphError(f"node {node.id!r}: padding must be valid or same")
        cin, cout = int(p["in_channels"]), int(p["out_channels"])
        if node.weights is None or node.weights.shape != (kh, kw, cin, cout):
            got = None if node.weights is None else node.weights.shape
            raise GraphError(f"node {node.id!r}: weights shape {got}, expected {(kh, kw, cin, cout)}")
        if node.bias is None or node.bias.shape != (cout,):
            raise GraphError(f"node {node.id!r}: bias must have {cout} values")
        if not (np.isfinite(node.weights).all() and np.isfinite(node.bias).all()):
            raise GraphError(f"node {node.id!r}: weights must be finite")


class ModelGraph:
    """Immutable DAG of tensor ops with named inputs and outputs."""

    def __init__(self, nodes, inputs: dict, outputs: dict):
        self.nodes = {}
        for node in nodes:
            if node.id in self.nodes:
                raise GraphError(f"duplicate node id {node.id!r}")
            if node.weights is not None:
                node.weights = np.ascontiguousarray(node.weights, dtype=np.float32)
                node.weights.setflags(write=False)
            if node.bias is not None:
                node.bias = np.ascontiguousarray(node.bias, dtype=np.float32)
                node.bias.setflags(write=False)
            node.inputs = tuple(node.inputs)
            _check_node(node)
            self.nodes[node.id] = node
        for node in self.nodes.values():
            for src in node.inputs:
                if src not in self.nodes:
                    raise GraphError(f"node {node.id!r} consumes unknown node {src!r}")
        self.inputs = dict(inputs)
        self.outputs = dict(outputs)
        for name, nid in self.inputs.items():
            if nid not in self.nodes or self.nodes[nid].op != "Input":
                raise GraphError(f"graph input {name!r} must reference an Input node")
        for nid, node in self.nodes.items():
            if node.op == "Input" and nid not in self.inputs.values():
                raise GraphError(f"Input node {nid!r} is not bound to a graph input name")
        for name, nid in self.outputs.items():
            if nid not in self.nodes:
                raise GraphError(f"graph output {name!r} references unknown node {nid!r}")
        if not self.outputs:
            raise GraphError("graph has no outputs")
        self.order = self._toposort()

    def _toposort(self):
        indegree = {nid: len(n.inputs) for nid, n in self.nodes.items()}
        consumers = self.consumers()
        ready = [nid for nid in self.nodes if indegree[nid] == 0]
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for c in consumers[nid]:
                indegree[c] -= 1
                if indegree[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            stuck = sorted(nid for nid, d in indegree.items() if d > 0)
            raise GraphError(f"graph has a cycle through {stuck}")
        return tuple(order)

    def consumers(self):
        out = {nid: [] for nid in self.nodes}
        for nid, node in self.nodes.items():
            for src in node.inputs:
                out[src].append(nid)
        return out

    def input_channels(self, name):
        return int(self.nodes[self.inputs[name]].params["channels"])

    def output_node(self, name=None):
        if name is None:
            name = next(iter(self.outputs))
        if name not in self.outputs:
            raise GraphError(f"unknown graph output {name!r}")
        return self.outputs[name]

    def ancestors(self, nid):
        seen, stack = set(), [nid]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(self.nodes[cur].inputs)
        return seen

    def __repr__(self):
        return f"ModelGraph({len(self.nodes)} nodes, inputs={list(self.inputs)}, outputs={list(self.outputs)})"


def weights_path(path) -> Path:
    path = Path(path)
    name = path.name[:-5] if path.name.endswith(".json") else path.name
    return path.with_name(name + ".bin")


def save_graph(graph: ModelGraph, path):
    path = Path(path)
    blobs, offset, docs = [], 0, []
    for nid in graph.order:
        node = graph.nodes[nid]
        params = dict(node.params)
        if node.op in WEIGHTED:
            block = np.concatenate([node.weights.ravel(), node.bias.ravel()]).astype("<f4")
            params["weights_offset"], params["weights_len"] = offset, int(block.size)
            blobs.append(block)
            offset += block.size
        docs.append({"id": nid, "op": node.op, "params": params, "inputs": list(node.inputs)})
    doc = {"version": FORMAT_VERSION, "inputs": graph.inputs, "outputs": graph.outputs, "nodes": docs}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
    blob = np.concatenate(blobs) if blobs else np.zeros(0, "<f4")
    weights_path(path).write_bytes(blob.astype("<f4").tobytes())


def load_graph(path) -> ModelGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        blob = np.frombuffer(weights_path(path).read_bytes(), dtype="<f4")
    except (OSError, ValueError) as exc:
        raise GraphError(f"cannot load model {path}: {exc}") from exc
    nodes = []
    for nd in doc.get("nodes", []):
        params = dict(nd.get("params", {}))
        node = Node(nd["id"], nd["op"], params, tuple(nd.get("inputs", ())))
        if node.op in WEIGHTED:
            off, n = int(params.pop("weights_offset")), int(params.pop("weights_len"))
            kh, kw = pair(params["kernel"])
            cin, cout = int(params["in_channels"]), int(params["out_channels"])
            if n != kh * kw * cin * cout + cout or off < 0 or off + n > blob.size:
                raise GraphError(f"{path}: node {node.id!r} weight block out of range")
            block = blob[off:off + n].astype(np.float32)
            node.weights = block[:-cout].reshape(kh, kw, cin, cout)
            node.bias = block[-cout:]
        nodes.append(node)
    return ModelGraph(nodes, doc.get("inputs", {}), doc.get("outputs", {}))
