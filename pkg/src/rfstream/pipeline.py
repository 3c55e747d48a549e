"""Demand-driven process-object pipeline.

Information flows downstream (:meth:`ProcessObject.update_output_information`),
requested regions flow upstream (:meth:`ProcessObject.requested_regions`),
and :func:`execute` drives the mapper region by region.

Buffer accounting: every object that allocates a pixel buffer reports it to a
:class:`BufferTracker`, and :meth:`ProcessObject.region_bytes` predicts the
tracked peak for a region without touching any pixel. Memory-budget splitting
uses the prediction; tests compare it with the tracked value.
"""

from __future__ import annotations

import queue
import threading
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import PipelineError, RasterIOError, RegionError
from .geometry import GeoInfo, ImageRegion
from .rfraw import DTYPES, PixelBuffer, RasterHeader, RasterReader, RasterWriter, dtype_name


@dataclass(frozen=True)
class ImageInfo:
    rows: int
    cols: int
    channels: int
    geo: GeoInfo = GeoInfo()
    dtype: str = "f32"

    @property
    def size(self):
        return (self.rows, self.cols, self.channels)

    @property
    def bounds(self):
        return ImageRegion.full(self.rows, self.cols)

    @property
    def pixel_bytes(self):
        return self.channels * DTYPES[self.dtype].itemsize

    def is_empty(self):
        return self.rows == 0 or self.cols == 0


class BufferTracker:
    """Running and peak byte count of live pixel buffers."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes):
        with self._lock:
            self.current += int(nbytes)
            self.peak = max(self.peak, self.current)

    def free(self, nbytes):
        with self._lock:
            self.current -= int(nbytes)


class NullTracker(BufferTracker):
    def alloc(self, nbytes):
        pass

    def free(self, nbytes):
        pass


# ---------------------------------------------------------------- process objects


class ProcessObject:
    """A pipeline node: source, filter, or (via :class:`Mapper`) sink."""

    #: True when :meth:`compute` hands back its input buffer unchanged.
    pass_through = False

    def __init__(self, *inputs):
        self.inputs = list(inputs)
        self._info = None
        self._updating = False

    @property
    def info(self) -> ImageInfo:
        if self._info is None:
            raise PipelineError(f"{type(self).__name__}: output information not generated yet")
        return self._info

    def update_output_information(self) -> ImageInfo:
        if self._updating:
            raise PipelineError(f"pipeline has a cycle through {type(self).__name__}")
        self._updating = True
        try:
            infos = [inp.update_output_information() for inp in self.inputs]
            self._info = self.generate_output_information(infos)
        finally:
            self._updating = False
        return self._info

    def generate_output_information(self, input_infos) -> ImageInfo:
        raise NotImplementedError

    def requested_regions(self, region: ImageRegion):
        """One requested region per input for producing ``region``."""
        return [region for _ in self.inputs]

    def compute(self, region, buffers, tracker) -> PixelBuffer:
        """Produce ``region`` from the fetched input buffers; track own allocations."""
        raise NotImplementedError

    def compute_bytes(self, region, requests) -> int:
        """Predicted tracked peak of :meth:`compute`, output buffer included."""
        return 0 if self.pass_through else self.output_bytes(region)

    def output_bytes(self, region):
        return region.npixels * self.info.pixel_bytes

    def produce(self, region: ImageRegion, tracker: BufferTracker) -> PixelBuffer:
        requests = self.requested_regions(region)
        buffers = [inp.produce(req, tracker) for inp, req in zip(self.inputs, requests)]
        out = self.compute(region, buffers, tracker)
        if out.region != region:
            raise PipelineError(
                f"{type(self).__name__} produced {out.region} when {region} was requested"
            )
        for buf in buffers:
            if buf is not out:
                tracker.free(buf.nbytes)
        return out

    def region_bytes(self, region: ImageRegion) -> int:
        """Predicted tracked peak while producing ``region``."""
        requests = self.requested_regions(region)
        peak = held = 0
        for inp, req in zip(self.inputs, requests):
            peak = max(peak, held + inp.region_bytes(req))
            held += inp.output_bytes(req)
        return max(peak, held + self.compute_bytes(region, requests))

    # footprint accounting, per pixel of this object's output
    def input_pixel_ratio(self, index):
        """Input pixels fetched per output pixel (area ratio of the grids)."""
        out, inp = self.info.geo, self.inputs[index].info.geo
        return abs(out.spacing_x * out.spacing_y / (inp.spacing_x * inp.spacing_y))

    def internal_bytes_per_pixel(self):
        return 0.0


class ArraySource(ProcessObject):
    """In-memory source; reads copy the requested slice."""

    def __init__(self, data, geo: GeoInfo = GeoInfo()):
        super().__init__()
        data = np.asarray(data)
        if data.ndim == 2:
            data = data[:, :, None]
        self.data = data
        self.geo = geo
        self.requests = []

    def generate_output_information(self, input_infos):
        rows, cols, channels = self.data.shape
        if min(rows, cols, channels) < 1:
            raise PipelineError(f"source has an empty header: {rows}x{cols}x{channels}")
        return ImageInfo(rows, cols, channels, self.geo, dtype_name(self.data.dtype))

    def produce(self, region, tracker):
        if not self.info.bounds.contains(region):
            raise RegionError(f"source asked for {region} outside its {self.info.rows}x{self.info.cols} bounds")
        self.requests.append(region)
        rs, cs = region.slices()
        buf = PixelBuffer(region, np.array(self.data[rs, cs]))
        tracker.alloc(buf.nbytes)
        return buf

    def region_bytes(self, region):
        return self.output_bytes(region)


class RasterSource(ProcessObject):
    """Source reading an RFRAW raster region by region."""

    def __init__(self, path):
        super().__init__()
        self.path = path
        self._reader = None
        self._lock = threading.Lock()
        self.requests = []

    def generate_output_information(self, input_infos):
        if self._reader is None:
            self._reader = RasterReader(self.path)
        h: RasterHeader = self._reader.header
        return ImageInfo(h.rows, h.cols, h.channels, h.geo, h.dtype)

    def produce(self, region, tracker):
        if not self.info.bounds.contains(region):
            raise RegionError(f"{self.path}: asked for {region} outside its {self.info.rows}x{self.info.cols} bounds")
        with self._lock:
            buf = self._reader.read_region(region)
        self.requests.append(region)
        tracker.alloc(buf.nbytes)
        return buf

    def region_bytes(self, region):
        return self.output_bytes(region)

    def close(self):
        if self._reader is not None:
            self._reader.close()
            self._reader = None


class IdentityFilter(ProcessObject):
    pass_through = True

    def generate_output_information(self, input_infos):
        return input_infos[0]

    def compute(self, region, buffers, tracker):
        return buffers[0]


class ChannelDuplicateFilter(ProcessObject):
    """Concatenates the input with itself along channels."""

    def generate_output_information(self, input_infos):
        i = input_infos[0]
        return ImageInfo(i.rows, i.cols, 2 * i.channels, i.geo, i.dtype)

    def compute(self, region, buffers, tracker):
        data = np.concatenate([buffers[0].data, buffers[0].data], axis=2)
        tracker.alloc(data.nbytes)
        return PixelBuffer(region, data)


# ---------------------------------------------------------------- mappers


class Mapper:
    """Pipeline sink. Writes stage a copy in the target element type."""

    def __init__(self, input: ProcessObject, dtype: str | None = None):
        self.input = input
        self.dtype = dtype
        self.info = None

    def update_output_information(self) -> ImageInfo:
        self.info = self.input.update_output_information()
        return self.info

    @property
    def target_dtype(self):
        return self.dtype or self.info.dtype

    def write_pixel_bytes(self):
        return self.info.channels * DTYPES[self.target_dtype].itemsize

    def region_bytes(self, region):
        held = self.input.output_bytes(region)
        return max(self.input.region_bytes(region), held + region.npixels * self.write_pixel_bytes())

    def begin(self, info: ImageInfo):
        pass

    def write(self, buffer: PixelBuffer, tracker: BufferTracker):
        staged = PixelBuffer(buffer.region, buffer.data.astype(DTYPES[self.target_dtype]))
        tracker.alloc(staged.nbytes)
        try:
            self.store(staged)
        finally:
            tracker.free(staged.nbytes)

    def store(self, buffer: PixelBuffer):
        raise NotImplementedError

    def end(self):
        pass


class ArrayMapper(Mapper):
    """Collects the output in memory and counts writes per pixel."""

    def begin(self, info):
        self.result = np.zeros(info.size, DTYPES[self.target_dtype])
        self.writes = np.zeros((info.rows, info.cols), np.int32)

    def store(self, buffer):
        rs, cs = buffer.region.slices()
        self.result[rs, cs] = buffer.data
        self.writes[rs, cs] += 1


class RasterFileMapper(Mapper):
    """Writes the output to an RFRAW raster; an empty output writes nothing."""

    def __init__(self, input, path, dtype=None, checked=False):
        super().__init__(input, dtype)
        self.path = path
        self.checked = checked
        self.writer = None

    def begin(self, info):
        if info.is_empty():
            return
        header = RasterHeader(info.cols, info.rows, info.channels, self.target_dtype, info.geo)
        self.writer = RasterWriter(self.path, header, checked=self.checked)

    def store(self, buffer):
        self.writer.write_region(buffer)

    def end(self):
        if self.writer is not None:
            self.writer.close()


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class Whole:
    def __str__(self):
        return "whole"


@dataclass(frozen=True)
class Striped:
    height: int

    def __post_init__(self):
        if self.height < 1:
            raise ValueError("stripe height must be positive")

    def __str__(self):
        return f"striped:{self.height}"


@dataclass(frozen=True)
class Tiled:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("tile dimensions must be positive")

    def __str__(self):
        return f"tiled:{self.width}x{self.height}"


@dataclass(frozen=True)
class MemoryBudget:
    bytes: int

    def __post_init__(self):
        if self.bytes < 1:
            raise ValueError("memory budget must be positive")

    def __str__(self):
        return f"budget:{self.bytes}"


def parse_split(text: str):
    """Parse ``whole``, ``striped:H``, ``tiled:WxH`` or ``budget:BYTES``."""
    kind, _, arg = text.strip().partition(":")
    try:
        if kind == "whole" and not arg:
            return Whole()
        if kind == "striped":
            return Striped(int(arg))
        if kind == "tiled":
            w, h = arg.lower().split("x")
            return Tiled(int(w), int(h))
        if kind == "budget":
            return MemoryBudget(int(arg))
    except ValueError as exc:
        raise ValueError(f"bad split strategy {text!r}: {exc}") from exc
    raise ValueError(f"bad split strategy {text!r}; use whole|striped:H|tiled:WxH|budget:BYTES")


def _stripes(rows, cols, h):
    return [ImageRegion(0, r, cols, min(h, rows - r)) for r in range(0, rows, h)]


def split_output(info: ImageInfo, strategy, footprint: float | None = None):
    """Row-major partition of the output image into requested regions."""
    rows, cols = info.rows, info.cols
    if rows == 0 or cols == 0:
        return []
    if isinstance(strategy, Whole):
        return [info.bounds]
    if isinstance(strategy, Striped):
        return _stripes(rows, cols, strategy.height)
    if isinstance(strategy, Tiled):
        return [
            ImageRegion(c, r, min(strategy.width, cols - c), min(strategy.height, rows - r))
            for r in range(0, rows, strategy.height)
            for c in range(0, cols, strategy.width)
        ]
    if isinstance(strategy, MemoryBudget):
        if not footprint or footprint <= 0:
            raise ValueError("memory budget splitting needs a positive footprint")
        h = int(strategy.bytes // (cols * footprint))
        if h < 1:
            warnings.warn(f"budget {strategy.bytes} B is below one row ({cols * footprint:.0f} B); "
                          "using 1-row stripes", stacklevel=2)
            h = 1
        return _stripes(rows, cols, min(h, rows))
    raise TypeError(f"unknown split strategy {strategy!r}")


def walk(mapper: Mapper):
    """Every process object upstream of the mapper with its pixels per output pixel."""
    out, stack = [], [(mapper.input, 1.0)]
    while stack:
        obj, ratio = stack.pop()
        out.append((obj, ratio))
        for i, inp in enumerate(obj.inputs):
            stack.append((inp, ratio * obj.input_pixel_ratio(i)))
    return out


def estimate_footprint(mapper: Mapper) -> float:
    """Bytes per output pixel of every buffer in the pipeline, model internals included."""
    total = float(mapper.write_pixel_bytes())
    for obj, ratio in walk(mapper):
        if not obj.pass_through:
            total += ratio * obj.info.pixel_bytes
        total += ratio * obj.internal_bytes_per_pixel()
    return total


def budget_stripe_height(mapper: Mapper, info: ImageInfo, budget: int) -> int:
    """Tallest stripe height whose predicted peak fits the budget for every stripe."""
    cache = {}

    def cost(h):
        if h not in cache:
            cache[h] = max(mapper.region_bytes(r) for r in _stripes(info.rows, info.cols, h))
        return cache[h]

    if cost(1) > budget:
        warnings.warn(f"budget {budget} B cannot hold a single output row "
                      f"({cost(1)} B predicted); using 1-row stripes", stacklevel=2)
        return 1
    lo, hi = 1, info.rows
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if cost(mid) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


@dataclass
class ExecutionStats:
    regions: list = field(default_factory=list)
    peak_bytes: int = 0
    seconds: float = 0.0
    strategy: object = None


def plan_regions(mapper: Mapper, strategy):
    info = mapper.update_output_information()
    if isinstance(strategy, MemoryBudget):
        if info.is_empty():
            return info, []
        h = budget_stripe_height(mapper, info, strategy.bytes)
        return info, split_output(info, Striped(h))
    return info, split_output(info, strategy)


def execute(mapper: Mapper, strategy=Whole(), overlap=False, tracker=None, progress=None) -> ExecutionStats:
    """Stream the pipeline into the mapper.

    ``overlap=True`` computes region k+1 on a worker thread while region k is
    written (hand-off queue of depth 1). ``progress(i, n, region)`` is called
    after each write.
    """
    tracker = tracker or BufferTracker()
    start = time.perf_counter()
    info, regions = plan_regions(mapper, strategy)
    stats = ExecutionStats(regions, strategy=strategy)
    mapper.begin(info)
    try:
        items = _produce_overlapped(mapper, regions, tracker) if overlap else _produce(mapper, regions, tracker)
        for i, (region, buf) in enumerate(items):
            try:
                mapper.write(buf, tracker)
            except (OSError, RasterIOError) as exc:
                raise PipelineError(f"writing region {i} ({region}) failed: {exc}") from exc
            finally:
                tracker.free(buf.nbytes)
            if progress is not None:
                progress(i, len(regions), region)
    finally:
        mapper.end()
    stats.peak_bytes = tracker.peak
    stats.seconds = time.perf_counter() - start
    return stats


def _produce(mapper, regions, tracker):
    for i, region in enumerate(regions):
        try:
            yield region, mapper.input.produce(region, tracker)
        except (OSError, RasterIOError) as exc:
            raise PipelineError(f"producing region {i} ({region}) failed: {exc}") from exc


def _produce_overlapped(mapper, regions, tracker):
    handoff = queue.Queue(maxsize=1)
    stop = threading.Event()
    done = object()

    def worker():
        try:
            for item in _produce(mapper, regions, tracker):
                while not stop.is_set():
                    try:
                        handoff.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            handoff.put(done)
        except BaseException as exc:  # re-raised on the writer side
            handoff.put(exc)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    try:
        while True:
            item = handoff.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while thread.is_alive():
            try:
                handoff.get(timeout=0.05)
            except queue.Empty:
                pass
        thread.join()
