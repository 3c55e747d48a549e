"""Graph builder and the stock synthetic models used by the CLI and tests."""

from __future__ import annotations

import numpy as np

from .graph import ModelGraph, Node, pair


class GraphBuilder:
    """Incremental construction of a :class:`ModelGraph` with seeded weights.

    >>> b = GraphBuilder(seed=0)
    >>> x = b.input("image", 4)
    >>> b.output("out", b.activation(b.conv(x, 8, 3), "relu"))
    >>> graph = b.build()
    """

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.nodes = []
        self.channels = {}
        self.inputs = {}
        self.outputs = {}

    def _add(self, op, inputs, channels, params=None, weights=None, bias=None):
        nid = f"n{len(self.nodes)}_{op.lower()}"
        self.nodes.append(Node(nid, op, dict(params or {}), tuple(inputs), weights, bias))
        self.channels[nid] = channels
        return nid

    def _weights(self, kernel, cin, cout, weights, bias):
        kh, kw = kernel
        if weights is None:
            scale = 1.0 / np.sqrt(kh * kw * cin)
            weights = self.rng.normal(0.0, scale, (kh, kw, cin, cout))
        if bias is None:
            bias = self.rng.normal(0.0, 0.1, cout)
        return np.asarray(weights, np.float32), np.asarray(bias, np.float32)

    def input(self, name, channels):
        nid = self._add("Input", (), channels, {"channels": channels})
        self.inputs[name] = nid
        return nid

    def conv(self, x, out_channels, kernel, stride=1, padding="valid", weights=None, bias=None):
        kernel, stride, cin = pair(kernel), pair(stride), self.channels[x]
        w, b = self._weights(kernel, cin, out_channels, weights, bias)
        params = {"kernel": list(kernel), "stride": list(stride), "padding": padding,
                  "in_channels": cin, "out_channels": out_channels}
        return self._add("Conv2D", (x,), out_channels, params, w, b)

    def transposed_conv(self, x, out_channels, kernel, stride, weights=None, bias=None):
        kernel, stride, cin = pair(kernel), pair(stride), self.channels[x]
        w, b = self._weights(kernel, cin, out_channels, weights, bias)
        params = {"kernel": list(kernel), "stride": list(stride),
                  "in_channels": cin, "out_channels": out_channels}
        return self._add("TransposedConv2D", (x,), out_channels, params, w, b)

    def pool(self, x, window, stride=None, mode="max"):
        window = pair(window)
        stride = window if stride is None else pair(stride)
        params = {"mode": mode, "window": list(window), "stride": list(stride)}
        return self._add("Pool", (x,), self.channels[x], params)

    def activation(self, x, fn):
        return self._add("Activation", (x,), self.channels[x], {"fn": fn})

    def concat(self, *xs):
        return self._add("ConcatChannels", xs, sum(self.channels[x] for x in xs))

    def add(self, *xs):
        return self._add("Add", xs, self.channels[xs[0]])

    def output(self, name, x):
        self.outputs[name] = x

    def build(self) -> ModelGraph:
        return ModelGraph(self.nodes, self.inputs, self.outputs)


def identity_graph(channels=4, input_name="input", output_name="output") -> ModelGraph:
    b = GraphBuilder()
    x = b.input(input_name, channels)
    b.output(output_name, b.activation(x, "identity"))
    return b.build()


def conv_pool_conv_graph(channels=3, seed=0) -> ModelGraph:
    """Conv 3x3 -> max pool 2x2/2 -> conv 3x3 (r=8, e=1, f=2)."""
    b = GraphBuilder(seed)
    x = b.input("input", channels)
    h = b.activation(b.conv(x, 4, 3), "relu")
    h = b.pool(h, 2, 2)
    b.output("output", b.conv(h, 2, 3))
    return b.build()


def fcn80_graph(channels=4, classes=2, width=4, seed=0) -> ModelGraph:
    """Fully-convolutional stand-in with an 80x80 receptive field and 16x16 blocks.

    Four 2x down-samplings (the first an average pool of 4, which keeps the
    full-resolution work small) followed by a 16x16/16 transposed convolution
    back to the input resolution. Receptive field per axis:
    4 -> 20 -> 24 -> 40 -> 48 -> 80, jump 16, then unit scale factor.
    """
    b = GraphBuilder(seed)
    x = b.input("input", channels)
    h = b.pool(x, 4, 4, mode="avg")
    h = b.activation(b.conv(h, width, 5), "relu")
    h = b.pool(h, 2, 2)
    h = b.activation(b.conv(h, width, 3), "relu")
    h = b.pool(h, 2, 2)
    h = b.activation(b.conv(h, width, 3), "relu")
    h = b.transposed_conv(h, classes, 16, 16)
    b.output("output", b.activation(h, "sigmoid"))
    return b.build()


def m3_like_graph(ts_channels=6, vhrs_channels=4, classes=8, ratio=5, seed=0) -> ModelGraph:
    """Two-input stand-in: a 1x1 time-series stack and a 25x25 very-high-res patch.

    The VHRS branch reduces its 25x25 window to one pixel with a stride equal
    to the grid ``ratio`` (VHRS pixels per TS pixel), so the branch also runs
    fully-convolutionally on aligned regions.
    """
    b = GraphBuilder(seed)
    ts = b.input("ts", ts_channels)
    vhrs = b.input("vhrs", vhrs_channels)
    t = b.activation(b.conv(ts, 8, 1), "tanh")
    v = b.activation(b.conv(vhrs, 8, 25, stride=ratio), "relu")
    h = b.concat(t, v)
    h = b.activation(b.conv(h, 8, 1), "relu")
    b.output("output", b.conv(h, classes, 1))
    return b.build()


MOCK_MODELS = {
    "identity": identity_graph,
    "conv-pool-conv": conv_pool_conv_graph,
    "fcn80": fcn80_graph,
    "m3": m3_like_graph,
}
