"""RFRAW v1: flat little-endian raster payload plus a JSON sidecar.

A raster ``name.rfraw`` stores ``rows * cols * channels`` elements in
row-major, channel-last order with no header. Its metadata lives in
``name.rfraw.json`` with exactly the keys of :data:`SIDECAR_KEYS`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RasterIOError, RegionError
from .geometry import GeoInfo, ImageRegion

DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2"), "f32": np.dtype("<f4")}
SIDECAR_KEYS = (
    "cols", "rows", "channels", "dtype",
    "origin_x", "origin_y", "spacing_x", "spacing_y", "projection",
)


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype).newbyteorder("<")
    for name, dt in DTYPES.items():
        if dt == dtype:
            return name
    raise ValueError(f"unsupported element type {dtype}")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


@dataclass(frozen=True)
class RasterHeader:
    cols: int
    rows: int
    channels: int
    dtype: str
    geo: GeoInfo = GeoInfo()

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if min(self.cols, self.rows, self.channels) < 1:
            raise ValueError(f"raster dimensions must be positive: {self.rows}x{self.cols}x{self.channels}")

    @property
    def itemsize(self):
        return DTYPES[self.dtype].itemsize

    @property
    def pixel_bytes(self):
        return self.channels * self.itemsize

    @property
    def payload_bytes(self):
        return self.rows * self.cols * self.pixel_bytes

    @property
    def bounds(self):
        return ImageRegion.full(self.rows, self.cols)

    def to_json(self):
        g = self.geo
        return {
            "cols": self.cols, "rows": self.rows, "channels": self.channels, "dtype": self.dtype,
            "origin_x": g.origin_x, "origin_y": g.origin_y,
            "spacing_x": g.spacing_x, "spacing_y": g.spacing_y, "projection": g.projection,
        }

    @classmethod
    def from_json(cls, doc):
        missing = [k for k in SIDECAR_KEYS if k not in doc]
        if missing:
            raise ValueError(f"sidecar is missing keys {missing}")
        geo = GeoInfo(float(doc["origin_x"]), float(doc["origin_y"]),
                      float(doc["spacing_x"]), float(doc["spacing_y"]), str(doc["projection"]))
        return cls(int(doc["cols"]), int(doc["rows"]), int(doc["channels"]), str(doc["dtype"]), geo)


@dataclass
class PixelBuffer:
    """Pixels of one region, shaped ``(rows, cols, channels)``."""

    region: ImageRegion
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"pixel data must be 3-d (rows, cols, channels), got {self.data.shape}")
        if self.data.shape[:2] != (self.region.rows, self.region.cols):
            raise ValueError(
                f"pixel data shape {self.data.shape[:2]} does not match region {self.region}"
            )

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def nbytes(self):
        return self.data.nbytes

    def crop(self, region: ImageRegion) -> PixelBuffer:
        """View of a sub-region (no copy)."""
        if not self.region.contains(region):
            raise RegionError(f"{region} is not inside buffer {self.region}")
        rs, cs = region.slices(self.region)
        return PixelBuffer(region, self.data[rs, cs])


def read_header(path) -> RasterHeader:
    side = sidecar_path(path)
    try:
        with open(side) as f:
            doc = json.load(f)
        header = RasterHeader.from_json(doc)
    except OSError as exc:
        raise RasterIOError(f"cannot read header {side}: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise RasterIOError(f"malformed header {side}: {exc}") from exc
    return header


def write_header(path, header: RasterHeader):
    with open(sidecar_path(path), "w") as f:
        json.dump(header.to_json(), f, indent=1)


class RasterReader:
    """Region reader; I/O is proportional to the region, one seek per row."""

    def __init__(self, path):
        self.path = Path(path)
        self.header = read_header(self.path)
        try:
            size = os.path.getsize(self.path)
        except OSError as exc:
            raise RasterIOError(f"cannot open payload {self.path}: {exc}") from exc
        if size != self.header.payload_bytes:
            raise RasterIOError(
                f"{self.path}: payload is {size} bytes, header implies {self.header.payload_bytes}"
            )
        self._file = open(self.path, "rb")

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def read_region(self, region: ImageRegion) -> PixelBuffer:
        h = self.header
        if not h.bounds.contains(region):
            raise RegionError(f"{self.path}: {region} is outside the {h.rows}x{h.cols} raster")
        dtype = DTYPES[h.dtype]
        out = np.empty((region.rows, region.cols, h.channels), dtype=dtype)
        if region.is_empty():
            return PixelBuffer(region, out)
        row_bytes = h.cols * h.pixel_bytes
        start = region.col * h.pixel_bytes
        f = self._file
        if region.cols == h.cols:
            f.seek(region.row * row_bytes)
            self._fill(out, region)
        else:
            for i in range(region.rows):
                f.seek((region.row + i) * row_bytes + start)
                self._fill(out[i], region)
        return PixelBuffer(region, out.astype(dtype.newbyteorder("="), copy=False))

    def _fill(self, target, region):
        view = memoryview(target).cast("B")
        n = self._file.readinto(view)
        if n != len(view):
            raise RasterIOError(f"{self.path}: truncated payload while reading {region}")


def read_region(path, region: ImageRegion) -> PixelBuffer:
    with RasterReader(path) as reader:
        return reader.read_region(region)


class RasterWriter:
    """Region writer for a raster created with a fixed header.

    With a header, a new raster is created; without one, an existing raster
    is opened in place. Full-width regions that continue where the previous
    one ended are appended sequentially; anything else seeks. ``checked``
    tracks coverage and rejects overlapping writes.
    """

    def __init__(self, path, header: RasterHeader | None = None, checked=False):
        self.path = Path(path)
        try:
            if header is None:
                header = read_header(self.path)
                self._file = open(self.path, "r+b")
            else:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                write_header(self.path, header)
                self._file = open(self.path, "wb+")
                self._file.truncate(header.payload_bytes)
        except OSError as exc:
            raise RasterIOError(f"cannot open {self.path} for writing: {exc}") from exc
        self.header = header
        self._next = -1
        self.coverage = np.zeros((header.rows, header.cols), dtype=bool) if checked else None

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def write_region(self, buffer: PixelBuffer):
        h, region = self.header, buffer.region
        if not h.bounds.contains(region):
            raise RegionError(f"{self.path}: {region} is outside the {h.rows}x{h.cols} raster")
        if buffer.channels != h.channels:
            raise RasterIOError(f"{self.path}: buffer has {buffer.channels} channels, raster {h.channels}")
        if region.is_empty():
            return
        if self.coverage is not None:
            rs, cs = region.slices()
            if self.coverage[rs, cs].any():
                raise RegionError(f"{self.path}: overlapping write at {region}")
            self.coverage[rs, cs] = True
        data = np.ascontiguousarray(buffer.data, dtype=DTYPES[h.dtype])
        row_bytes = h.cols * h.pixel_bytes
        try:
            if region.cols == h.cols:
                offset = region.row * row_bytes
                if offset != self._next:
                    self._file.seek(offset)
                self._file.write(data.tobytes())
                self._next = offset + data.nbytes
            else:
                start = region.col * h.pixel_bytes
                for i in range(region.rows):
                    self._file.seek((region.row + i) * row_bytes + start)
                    self._file.write(data[i].tobytes())
                self._next = -1
        except OSError as exc:
            raise RasterIOError(f"{self.path}: write failed at {region}: {exc}") from exc


def write_region(path, buffer: PixelBuffer):
    """Write into an existing raster in place."""
    with RasterWriter(path) as writer:
        writer.write_region(buffer)


def save_array(path, data: np.ndarray, geo: GeoInfo = GeoInfo()) -> RasterHeader:
    """Write a whole ``(rows, cols, channels)`` array as a new raster."""
    if data.ndim == 2:
        data = data[:, :, None]
    header = RasterHeader(data.shape[1], data.shape[0], data.shape[2], dtype_name(data.dtype), geo)
    with RasterWriter(path, header) as w:
        w.write_region(PixelBuffer(header.bounds, data))
    return header


def load_array(path) -> np.ndarray:
    with RasterReader(path) as r:
        return r.read_region(r.header.bounds).data
