"""Forward execution with a fixed accumulation order.

Every kernel accumulates in row-major kernel order, then input channel, using
plain elementwise float32 arithmetic. An output value therefore depends only
on its own input window, never on where that window sits in the tensor, which
is what makes streamed and whole-image runs bit-identical.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .graph import ModelGraph, pair

F32 = np.float32


def _same_pad(n, k, s):
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def _windowed_size(nid, n, k, s, axis):
    if n < k:
        raise ShapeError(nid, f"{axis} size {n} is smaller than the {k}-wide window")
    return (n - k) // s + 1


def node_shape(graph: ModelGraph, nid, in_shapes):
    """Output shape ``(batch, rows, cols, channels)`` of one node."""
    node = graph.nodes[nid]
    op, p = node.op, node.params
    if op in ("Activation",):
        return in_shapes[0]
    if op in ("ConcatChannels", "Add"):
        first = in_shapes[0]
        for s in in_shapes[1:]:
            if s[:3] != first[:3] or (op == "Add" and s != first):
                raise ShapeError(nid, f"cannot merge shapes {list(in_shapes)}")
        if op == "Add":
            return first
        return first[:3] + (sum(s[3] for s in in_shapes),)
    b, h, w, c = in_shapes[0]
    (kh, kw), (sr, sc) = node.kernel(), node.stride()
    if op in ("Conv2D", "TransposedConv2D") and c != int(p["in_channels"]):
        raise ShapeError(nid, f"expects {p['in_channels']} input channels, got {c}")
    if op == "Conv2D":
        cout = int(p["out_channels"])
        if p.get("padding", "valid") == "same":
            if h < 1 or w < 1:
                raise ShapeError(nid, f"empty input {in_shapes[0]}")
            return (b, -(-h // sr), -(-w // sc), cout)
        return (b, _windowed_size(nid, h, kh, sr, "row"), _windowed_size(nid, w, kw, sc, "col"), cout)
    if op == "Pool":
        return (b, _windowed_size(nid, h, kh, sr, "row"), _windowed_size(nid, w, kw, sc, "col"), c)
    if op == "TransposedConv2D":
        oh, ow = h * sr - max(kh - sr, 0), w * sc - max(kw - sc, 0)
        if h < 1 or w < 1 or oh < 1 or ow < 1:
            raise ShapeError(nid, f"input {h}x{w} too small for transposed kernel {kh}x{kw}")
        return (b, oh, ow, int(p["out_channels"]))
    raise ShapeError(nid, f"no shape rule for op {op}")


def _normalize_shape(shape):
    shape = tuple(int(v) for v in shape)
    if len(shape) == 3:
        return (1,) + shape
    if len(shape) != 4:
        raise ValueError(f"tensor shape must be (batch, rows, cols, channels), got {shape}")
    return shape


def infer_shapes(graph: ModelGraph, input_shapes) -> dict:
    """Shapes of every node reachable from the given inputs."""
    if not isinstance(input_shapes, dict):
        if len(graph.inputs) != 1:
            raise ValueError("pass a name -> shape mapping for multi-input graphs")
        input_shapes = {next(iter(graph.inputs)): input_shapes}
    shapes = {}
    for name, nid in graph.inputs.items():
        if name not in input_shapes:
            raise ShapeError(nid, f"no shape given for graph input {name!r}")
        shape = _normalize_shape(input_shapes[name])
        if shape[3] != graph.input_channels(name):
            raise ShapeError(nid, f"input {name!r} expects {graph.input_channels(name)} channels, got {shape[3]}")
        shapes[nid] = shape
    for nid in graph.order:
        node = graph.nodes[nid]
        if node.op == "Input":
            continue
        shapes[nid] = node_shape(graph, nid, [shapes[s] for s in node.inputs])
    return shapes


# ---------------------------------------------------------------- kernels


def _conv2d(x, w, b, stride, padding):
    kh, kw, cin, cout = w.shape
    sr, sc = stride
    if padding == "same":
        pr, pc = _same_pad(x.shape[1], kh, sr), _same_pad(x.shape[2], kw, sc)
        x = np.pad(x, ((0, 0), pr, pc, (0, 0)))
    n, h, wd, _ = x.shape
    oh, ow = (h - kh) // sr + 1, (wd - kw) // sc + 1
    out = np.zeros((n, oh, ow, cout), F32)
    tmp = np.empty_like(out)
    for dy in range(kh):
        for dx in range(kw):
            xs = x[:, dy:dy + sr * (oh - 1) + 1:sr, dx:dx + sc * (ow - 1) + 1:sc, :]
            for ci in range(cin):
                np.multiply(xs[..., ci:ci + 1], w[dy, dx, ci], out=tmp)
                out += tmp
    out += b
    return out


def _transposed_conv2d(x, w, b, stride):
    kh, kw, cin, cout = w.shape
    sr, sc = stride
    n, h, wd, _ = x.shape
    acc = np.zeros((n, (h - 1) * sr + max(kh, sr), (wd - 1) * sc + max(kw, sc), cout), F32)
    tmp = np.empty((n, h, wd, cout), F32)
    for dy in range(kh):
        for dx in range(kw):
            dst = acc[:, dy:dy + sr * (h - 1) + 1:sr, dx:dx + sc * (wd - 1) + 1:sc, :]
            for ci in range(cin):
                np.multiply(x[..., ci:ci + 1], w[dy, dx, ci], out=tmp)
                dst += tmp
    # keep only outputs whose every contribution lies inside the input
    cr, cc = max(kh - sr, 0), max(kw - sc, 0)
    out = acc[:, cr:h * sr, cc:wd * sc, :] + b
    return out


def _pool(x, window, stride, mode):
    kh, kw = window
    sr, sc = stride
    n, h, wd, c = x.shape
    oh, ow = (h - kh) // sr + 1, (wd - kw) // sc + 1
    out = None
    for dy in range(kh):
        for dx in range(kw):
            xs = x[:, dy:dy + sr * (oh - 1) + 1:sr, dx:dx + sc * (ow - 1) + 1:sc, :]
            if out is None:
                out = np.array(xs, dtype=F32)
            elif mode == "max":
                np.maximum(out, xs, out=out)
            else:
                out += xs
    if mode == "avg":
        out /= F32(kh * kw)
    return out


def _activation(x, fn):
    if fn == "identity":
        return x.copy()
    if fn == "relu":
        return np.maximum(x, F32(0))
    if fn == "tanh":
        return np.tanh(x)
    with np.errstate(over="ignore"):
        return F32(1) / (F32(1) + np.exp(-x))


def run_node(node, args):
    op, p = node.op, node.params
    if op == "Conv2D":
        return _conv2d(args[0], node.weights, node.bias, node.stride(), p.get("padding", "valid"))
    if op == "TransposedConv2D":
        return _transposed_conv2d(args[0], node.weights, node.bias, node.stride())
    if op == "Pool":
        return _pool(args[0], pair(p["window"]), node.stride(), p["mode"])
    if op == "Activation":
        return _activation(args[0], p["fn"])
    if op == "ConcatChannels":
        return np.concatenate(args, axis=3)
    if op == "Add":
        out = args[0].copy()
        for a in args[1:]:
            out += a
        return out
    raise ValueError(f"cannot execute op {op}")


def forward(graph: ModelGraph, inputs: dict, outputs=None, tracker=None) -> dict:
    """Run the graph on float32 ``(batch, rows, cols, channels)`` tensors.

    ``outputs`` restricts which named outputs are computed. ``tracker``, when
    given, is told about every intermediate allocation and release
    (``alloc(nbytes)`` / ``free(nbytes)``); input tensors belong to the caller.
    """
    names = list(graph.outputs) if outputs is None else list(outputs)
    targets = {graph.output_node(n) for n in names}
    needed = set().union(*(graph.ancestors(t) for t in targets))
    arrays = {}
    shapes_in = {}
    for name, nid in graph.inputs.items():
        if nid not in needed:
            continue
        if name not in inputs:
            raise ShapeError(nid, f"missing graph input {name!r}")
        arr = np.asarray(inputs[name], dtype=F32)
        arrays[nid] = arr
        shapes_in[name] = arr.shape
    sub_inputs = {n: s for n, s in shapes_in.items()}
    # validate shapes up front so errors name the node before any compute
    shapes = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        if nid not in needed:
            continue
        if node.op == "Input":
            name = next(n for n, i in graph.inputs.items() if i == nid)
            shape = _normalize_shape(sub_inputs[name])
            if shape[3] != graph.input_channels(name):
                raise ShapeError(nid, f"input {name!r} expects {graph.input_channels(name)} channels, got {shape[3]}")
            shapes[nid] = shape
        else:
            shapes[nid] = node_shape(graph, nid, [shapes[s] for s in node.inputs])
    remaining = {nid: 0 for nid in needed}
    for nid in needed:
        for src in graph.nodes[nid].inputs:
            remaining[src] += 1
    for nid in graph.order:
        node = graph.nodes[nid]
        if nid not in needed or node.op == "Input":
            continue
        out = run_node(node, [arrays[s] for s in node.inputs])
        arrays[nid] = out
        if tracker is not None:
            tracker.alloc(out.nbytes)
        for src in node.inputs:
            remaining[src] -= 1
            if remaining[src] == 0 and src not in targets:
                released = arrays.pop(src)
                if tracker is not None and graph.nodes[src].op != "Input":
                    tracker.free(released.nbytes)
    return {n: arrays[graph.output_node(n)] for n in names}
