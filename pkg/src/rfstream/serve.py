"""Model serving as a pipeline filter.

The output image is a grid of expression blocks. Block ``k`` (per axis) reads
the reference input window starting at ``(k + k_off) * step``; secondary
inputs read a window of their own receptive field centered on the physical
center of that reference window. ``k_off`` and the block count are chosen so
every window of every input lies inside its image, which is why no padding
is ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, PipelineError, SpecError
from .geometry import FieldSpec, ImageRegion, SecondaryGrid, block_span, propagate_geo
from .netgraph import ModelGraph, forward, infer_shapes, peak_intermediate_bytes, validate_fields
from .pipeline import ImageInfo, NullTracker, ProcessObject
from .rfraw import PixelBuffer

FULLY_CONVOLUTIONAL = "fully_convolutional"
PATCH_BASED = "patch_based"
_MODES = {
    "fullconv": FULLY_CONVOLUTIONAL, FULLY_CONVOLUTIONAL: FULLY_CONVOLUTIONAL,
    "patch": PATCH_BASED, PATCH_BASED: PATCH_BASED,
}
F32 = np.float32


@dataclass
class ServeConfig:
    """How a graph is applied: mode, fields, and which image feeds which input.

    ``bindings`` maps image ids to graph input names (identity by default);
    ``spec`` is keyed by graph input names.
    """

    graph: ModelGraph
    spec: FieldSpec
    mode: str = FULLY_CONVOLUTIONAL
    bindings: dict | None = None
    output: str | None = None
    batch_size: int = 64
    _validated: bool = field(default=False, init=False, repr=False)

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {sorted(_MODES)}, got {self.mode!r}")
        self.mode = _MODES[self.mode]
        if self.bindings is None:
            self.bindings = {name: name for name in self.graph.inputs}
        bound = list(self.bindings.values())
        if sorted(bound) != sorted(self.graph.inputs) or len(set(bound)) != len(bound):
            raise SpecError(f"every graph input must be bound exactly once: graph inputs "
                            f"{sorted(self.graph.inputs)}, bindings {self.bindings}")
        if set(self.spec.receptive_fields) != set(self.graph.inputs):
            raise SpecError(f"field spec declares inputs {sorted(self.spec.receptive_fields)}, "
                            f"graph has {sorted(self.graph.inputs)}")
        if self.output is None:
            self.output = next(iter(self.graph.outputs))
        self.graph.output_node(self.output)
        if self.batch_size < 1:
            raise ValueError("patch batch size must be at least 1")

    def validate(self):
        """Raise :class:`SpecError` unless the graph honors the declared fields."""
        if self._validated:
            return
        if self.mode == FULLY_CONVOLUTIONAL:
            report = validate_fields(self.graph, self.spec, self.output)
            if not report.passed:
                raise SpecError(str(report))
        else:
            got = self._patch_output_size(1)
            e = self.spec.expression_field
            if got[0] < e[0] or got[1] < e[1]:
                raise SpecError(f"one patch yields a {got[0]}x{got[1]} output, smaller than the "
                                f"{e[0]}x{e[1]} expression field")
        self._validated = True

    def _patch_output_size(self, batch):
        shapes = {n: (batch,) + rf + (self.graph.input_channels(n),)
                  for n, rf in self.spec.receptive_fields.items()}
        return infer_shapes(self.graph, shapes)[self.graph.output_node(self.output)][1:3]

    @property
    def output_channels(self):
        shapes = {n: (1,) + rf + (self.graph.input_channels(n),)
                  for n, rf in self.spec.receptive_fields.items()}
        return infer_shapes(self.graph, shapes)[self.graph.output_node(self.output)][3]


class ServeLayout:
    """Expression-block grid of one served output over its input grids.

    Built from the inputs' :class:`ImageInfo` (keyed by graph input name). With
    no infos the layout is unbounded and single-input: block ``k`` reads the
    reference input at ``k * step``.
    """

    def __init__(self, config: ServeConfig, infos: dict | None = None):
        infos = infos or {}
        spec = config.spec
        self.config = config
        self.ref = spec.reference_input
        self.e, self.d, self.r = spec.expression_field, spec.step, spec.receptive_field
        self.k_off = (0, 0)
        self.n_blocks = None
        self.secondaries = {}
        others = [n for n in spec.receptive_fields if n != self.ref]
        if not infos:
            if others:
                raise SpecError("multi-input serving needs the inputs' grid information")
            return
        ref_info = infos[self.ref]
        for name in others:
            info = infos[name]
            if not ref_info.geo.aligned_with(info.geo):
                raise AlignmentError(f"input {name!r} grid is not aligned with reference {self.ref!r}")
            self.secondaries[name] = SecondaryGrid(
                name, info.geo, spec.receptive_fields[name], ref_info.geo, self.r)
            if config.mode == FULLY_CONVOLUTIONAL:
                for axis in (0, 1):
                    ratio = self.d[axis] * abs(ref_info.geo.axis(axis)[1] / info.geo.axis(axis)[1])
                    if abs(ratio - round(ratio)) > 1e-6:
                        raise SpecError(f"input {name!r}: block step of {ratio:g} pixels is not integral; "
                                        "use patch-based mode")
        spans = [self._block_range(axis, infos) for axis in (0, 1)]
        self.k_off = tuple(s[0] for s in spans)
        self.n_blocks = tuple(s[1] for s in spans)

    def _block_range(self, axis, infos):
        n_ref = (infos[self.ref].rows, infos[self.ref].cols)[axis]
        d, r = self.d[axis], self.r[axis]
        if n_ref < r:
            return 0, 0
        kmax = (n_ref - r) // d

        def starts_inside(k):
            return all(s.window_start(axis, k * d) >= 0 for s in self.secondaries.values())

        def ends_inside(k):
            return all(
                s.window_start(axis, k * d) + s.receptive_field[axis]
                <= (infos[s.name].rows, infos[s.name].cols)[axis]
                for s in self.secondaries.values()
            )

        k0 = 0
        while k0 <= kmax and not starts_inside(k0):
            k0 += 1
        k1 = kmax
        while k1 >= k0 and not ends_inside(k1):
            k1 -= 1
        return k0, max(k1 - k0 + 1, 0)

    def output_size(self):
        return tuple(n * e for n, e in zip(self.n_blocks, self.e))

    def ref_start(self, axis, k):
        return (k + self.k_off[axis]) * self.d[axis]

    def window(self, name, kr, kc) -> ImageRegion:
        """Input window of output block ``(kr, kc)`` on input ``name``."""
        ref = ImageRegion(self.ref_start(1, kc), self.ref_start(0, kr), self.r[1], self.r[0])
        if name == self.ref:
            return ref
        return self.secondaries[name].window(ref)

    def blocks(self, region: ImageRegion):
        """Block index spans ``((k0r, k1r), (k0c, k1c))`` touched by an output region."""
        return block_span(region.row, region.rows, self.e[0]), block_span(region.col, region.cols, self.e[1])

    def input_region(self, name, region: ImageRegion) -> ImageRegion:
        if region.is_empty():
            return ImageRegion()
        (k0r, k1r), (k0c, k1c) = self.blocks(region)
        return self.window(name, k0r, k0c).union(self.window(name, k1r, k1c))


def _fetch_all(layout, region, fetch):
    buffers = {}
    for name in layout.config.spec.receptive_fields:
        want = layout.input_region(name, region)
        try:
            buf = fetch(name, want)
        except OSError as exc:
            raise PipelineError(f"fetching {name!r} {want} failed: {exc}") from exc
        if buf.region != want:
            raise PipelineError(f"fetch for {name!r} returned {buf.region}, expected {want}")
        buffers[name] = buf
    return buffers


def _output_is_input(config):
    return config.graph.nodes[config.graph.output_node(config.output)].op == "Input"


def serve_region_fullyconv(config: ServeConfig, requested_output: ImageRegion, fetch,
                           layout: ServeLayout | None = None, tracker=None) -> PixelBuffer:
    """Run the graph once over the block-aligned input of ``requested_output``.

    ``fetch(input_name, region)`` returns a :class:`PixelBuffer` of exactly
    that region. The forward output covers every touched block; only the
    requested sub-region is kept.
    """
    layout = layout or ServeLayout(config)
    tracker = tracker or NullTracker()
    channels = config.output_channels
    if requested_output.is_empty():
        return PixelBuffer(requested_output, np.zeros((requested_output.rows, requested_output.cols, channels), F32))
    buffers = _fetch_all(layout, requested_output, fetch)
    tensors, converted = {}, 0
    for name, buf in buffers.items():
        arr = buf.data
        if arr.dtype != F32:
            arr = arr.astype(F32)
            converted += arr.nbytes
            tracker.alloc(arr.nbytes)
        tensors[name] = arr[None]
    full = forward(config.graph, tensors, outputs=[config.output], tracker=tracker)[config.output][0]
    (k0r, k1r), (k0c, k1c) = layout.blocks(requested_output)
    need = ((k1r - k0r + 1) * layout.e[0], (k1c - k0c + 1) * layout.e[1])
    if full.shape[0] < need[0] or full.shape[1] < need[1]:
        raise PipelineError(f"model produced {full.shape[0]}x{full.shape[1]} for {requested_output}, "
                            f"fields predict {need[0]}x{need[1]}")
    r0, c0 = requested_output.row - k0r * layout.e[0], requested_output.col - k0c * layout.e[1]
    data = np.array(full[r0:r0 + requested_output.rows, c0:c0 + requested_output.cols])
    tracker.alloc(data.nbytes)
    if not _output_is_input(config):
        tracker.free(full.nbytes)
    tracker.free(converted)
    return PixelBuffer(requested_output, data)


def serve_region_patchbased(config: ServeConfig, requested_output: ImageRegion, fetch,
                            layout: ServeLayout | None = None, tracker=None) -> PixelBuffer:
    """Run the graph on one receptive window per expression block, in batches."""
    layout = layout or ServeLayout(config)
    tracker = tracker or NullTracker()
    e = layout.e
    out = np.zeros((requested_output.rows, requested_output.cols, config.output_channels), F32)
    if requested_output.is_empty():
        return PixelBuffer(requested_output, out)
    tracker.alloc(out.nbytes)
    buffers = _fetch_all(layout, requested_output, fetch)
    (k0r, k1r), (k0c, k1c) = layout.blocks(requested_output)
    blocks = [(kr, kc) for kr in range(k0r, k1r + 1) for kc in range(k0c, k1c + 1)]
    for start in range(0, len(blocks), config.batch_size):
        batch = blocks[start:start + config.batch_size]
        stacks, stacked = {}, 0
        for name, buf in buffers.items():
            rf = config.spec.receptive_fields[name]
            stack = np.empty((len(batch),) + rf + (buf.channels,), F32)
            for i, (kr, kc) in enumerate(batch):
                stack[i] = buf.crop(layout.window(name, kr, kc)).data
            stacks[name] = stack
            stacked += stack.nbytes
        tracker.alloc(stacked)
        res = forward(config.graph, stacks, outputs=[config.output], tracker=tracker)[config.output]
        if res.shape[1] < e[0] or res.shape[2] < e[1]:
            raise PipelineError(f"one patch yields {res.shape[1]}x{res.shape[2]}, "
                                f"expression field is {e[0]}x{e[1]}")
        for i, (kr, kc) in enumerate(batch):
            block = ImageRegion(kc * e[1], kr * e[0], e[1], e[0])
            part = block.intersection(requested_output)
            src_r, src_c = part.slices(block)
            dst_r, dst_c = part.slices(requested_output)
            out[dst_r, dst_c] = res[i, src_r, src_c]
        if not _output_is_input(config):
            tracker.free(res.nbytes)
        tracker.free(stacked)
    return PixelBuffer(requested_output, out)


class ServeFilter(ProcessObject):
    """Pipeline filter applying a model to one or more input images.

    ``inputs`` maps image ids (see ``config.bindings``) to upstream objects.
    """

    def __init__(self, config: ServeConfig, inputs: dict):
        self.config = config
        missing = set(config.bindings) - set(inputs)
        if missing:
            raise SpecError(f"no upstream object for images {sorted(missing)}")
        self.names = [config.bindings[image] for image in config.bindings]
        super().__init__(*(inputs[image] for image in config.bindings))
        self.layout = None
        self._peaks = {}

    def generate_output_information(self, input_infos):
        self.config.validate()
        infos = dict(zip(self.names, input_infos))
        self.layout = ServeLayout(self.config, infos)
        rows, cols = self.layout.output_size()
        ref = infos[self.config.spec.reference_input]
        geo = propagate_geo(ref.geo, self.config.spec).shifted(
            self.layout.k_off[0] * self.layout.e[0], self.layout.k_off[1] * self.layout.e[1])
        return ImageInfo(rows, cols, self.config.output_channels, geo, "f32")

    def requested_regions(self, region):
        return [self.layout.input_region(name, region) for name in self.names]

    def compute(self, region, buffers, tracker):
        by_name = {name: buf for name, buf in zip(self.names, buffers)}

        def fetch(name, want):
            return by_name[name]

        serve = serve_region_fullyconv if self.config.mode == FULLY_CONVOLUTIONAL else serve_region_patchbased
        return serve(self.config, region, fetch, self.layout, tracker)

    # ---- accounting

    def _graph_peak(self, shapes):
        key = tuple(sorted(shapes.items()))
        if key not in self._peaks:
            g = self.config.graph
            peak = 0 if _output_is_input(self.config) else peak_intermediate_bytes(
                g, shapes, include_inputs=False, outputs=[self.config.output])
            out_shape = infer_shapes(g, shapes)[g.output_node(self.config.output)]
            self._peaks[key] = (peak, 4 * int(np.prod(out_shape)))
        return self._peaks[key]

    def compute_bytes(self, region, requests):
        out_bytes = self.output_bytes(region)
        if region.is_empty():
            return 0
        g = self.config.graph
        if self.config.mode == FULLY_CONVOLUTIONAL:
            converted = sum(
                req.npixels * inp.info.channels * 4
                for inp, req in zip(self.inputs, requests) if inp.info.dtype != "f32")
            shapes = {name: (1, req.rows, req.cols, g.input_channels(name))
                      for name, req in zip(self.names, requests)}
            peak, full = self._graph_peak(shapes)
            if _output_is_input(self.config):
                full = 0
            return converted + max(peak, full + out_bytes)
        (k0r, k1r), (k0c, k1c) = self.layout.blocks(region)
        n = (k1r - k0r + 1) * (k1c - k0c + 1)
        sizes = {min(n, self.config.batch_size)}
        if n % self.config.batch_size:
            sizes.add(n % self.config.batch_size)
        worst = 0
        for b in sizes:
            shapes = {name: (b,) + rf + (g.input_channels(name),)
                      for name, rf in self.config.spec.receptive_fields.items()}
            stack = sum(4 * int(np.prod(s)) for s in shapes.values())
            worst = max(worst, stack + self._graph_peak(shapes)[0])
        return out_bytes + worst

    def internal_bytes_per_pixel(self):
        info = self.info
        if info.is_empty():
            return 0.0
        region = info.bounds
        return max(self.compute_bytes(region, self.requested_regions(region)) - self.output_bytes(region), 0) / region.npixels
