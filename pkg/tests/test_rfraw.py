import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfstream.errors import RasterIOError, RegionError
from rfstream.geometry import GeoInfo, ImageRegion
from rfstream.rfraw import (
    SIDECAR_KEYS,
    PixelBuffer,
    RasterHeader,
    RasterReader,
    RasterWriter,
    load_array,
    read_region,
    save_array,
    sidecar_path,
    write_region,
)


@pytest.fixture
def raster(tmp_path, rng):
    data = rng.integers(0, 65535, (37, 23, 3), endpoint=True).astype(np.uint16)
    path = tmp_path / "img.rfraw"
    save_array(path, data, GeoInfo(100.5, 200.5, 1.0, -1.0, "EPSG:32631"))
    return path, data


def test_sidecar_has_exact_keys(raster):
    path, data = raster
    doc = json.loads(sidecar_path(path).read_text())
    assert sorted(doc) == sorted(SIDECAR_KEYS)
    assert (doc["rows"], doc["cols"], doc["channels"], doc["dtype"]) == (37, 23, 3, "u16")
    assert doc["projection"] == "EPSG:32631"


def test_payload_is_little_endian_row_major(raster):
    path, data = raster
    assert path.read_bytes() == data.astype("<u2").tobytes()


def test_full_read(raster):
    path, data = raster
    assert np.array_equal(load_array(path), data)


def test_first_pixel(raster):
    path, data = raster
    buf = read_region(path, ImageRegion(0, 0, 1, 1))
    assert buf.data.shape == (1, 1, 3)
    assert buf.data.tobytes() == path.read_bytes()[:6]


def test_out_of_bounds_read(raster):
    path, _ = raster
    with pytest.raises(RegionError):
        read_region(path, ImageRegion(23, 0, 1, 1))


def test_truncated_payload_detected(raster):
    path, _ = raster
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(RasterIOError, match="payload"):
        RasterReader(path)


def test_header_rejects_zero_size():
    with pytest.raises(ValueError):
        RasterHeader(0, 10, 1, "u8")


def test_missing_sidecar(tmp_path):
    (tmp_path / "x.rfraw").write_bytes(b"")
    with pytest.raises(RasterIOError):
        RasterReader(tmp_path / "x.rfraw")


@given(st.data())
def test_region_read_equals_slice(tmp_path_factory, data):
    rows, cols, ch = data.draw(st.integers(1, 20)), data.draw(st.integers(1, 20)), data.draw(st.integers(1, 4))
    dtype = data.draw(st.sampled_from(["u8", "u16", "f32"]))
    arr = np.random.default_rng(data.draw(st.integers(0, 999))).random((rows, cols, ch)) * 200
    arr = arr.astype({"u8": np.uint8, "u16": np.uint16, "f32": np.float32}[dtype])
    path = tmp_path_factory.mktemp("r") / "a.rfraw"
    save_array(path, arr)
    r0 = data.draw(st.integers(0, rows - 1))
    c0 = data.draw(st.integers(0, cols - 1))
    region = ImageRegion(c0, r0, data.draw(st.integers(0, cols - c0)), data.draw(st.integers(0, rows - r0)))
    assert np.array_equal(read_region(path, region).data, arr[r0:region.row_end, c0:region.col_end])


@given(st.data())
def test_write_then_read_round_trip(tmp_path_factory, data):
    rows, cols = data.draw(st.integers(1, 16)), data.draw(st.integers(1, 16))
    arr = np.random.default_rng(data.draw(st.integers(0, 999))).random((rows, cols, 2)).astype(np.float32)
    path = tmp_path_factory.mktemp("w") / "a.rfraw"
    header = RasterHeader(cols, rows, 2, "f32")
    r0, c0 = data.draw(st.integers(0, rows - 1)), data.draw(st.integers(0, cols - 1))
    region = ImageRegion(c0, r0, data.draw(st.integers(1, cols - c0)), data.draw(st.integers(1, rows - r0)))
    with RasterWriter(path, header) as w:
        w.write_region(PixelBuffer(region, arr[region.slices()]))
    assert np.array_equal(read_region(path, region).data, arr[region.slices()])


def test_stripes_equal_single_write(tmp_path, rng):
    arr = rng.random((100, 17, 2)).astype(np.float32)
    save_array(tmp_path / "one.rfraw", arr)
    header = RasterHeader(17, 100, 2, "f32")
    with RasterWriter(tmp_path / "two.rfraw", header) as w:
        for r0, r1 in ((0, 40), (40, 100)):
            region = ImageRegion.from_spans((r0, r1), (0, 17))
            w.write_region(PixelBuffer(region, arr[r0:r1]))
    assert (tmp_path / "one.rfraw").read_bytes() == (tmp_path / "two.rfraw").read_bytes()


def test_out_of_order_tiles(tmp_path, rng):
    arr = rng.random((30, 30, 1)).astype(np.float32)
    header = RasterHeader(30, 30, 1, "f32")
    tiles = [ImageRegion(c, r, 10, 10) for r in (20, 0, 10) for c in (10, 0, 20)]
    with RasterWriter(tmp_path / "t.rfraw", header) as w:
        for t in tiles:
            w.write_region(PixelBuffer(t, arr[t.slices()]))
    assert np.array_equal(load_array(tmp_path / "t.rfraw"), arr)


def test_checked_mode_rejects_overlap(tmp_path):
    header = RasterHeader(10, 10, 1, "u8")
    with RasterWriter(tmp_path / "c.rfraw", header, checked=True) as w:
        w.write_region(PixelBuffer(ImageRegion(0, 0, 10, 6), np.zeros((6, 10, 1), np.uint8)))
        with pytest.raises(RegionError):
            w.write_region(PixelBuffer(ImageRegion(0, 5, 10, 5), np.zeros((5, 10, 1), np.uint8)))


def test_write_outside_bounds(tmp_path):
    with RasterWriter(tmp_path / "c.rfraw", RasterHeader(4, 4, 1, "u8")) as w:
        with pytest.raises(RegionError):
            w.write_region(PixelBuffer(ImageRegion(2, 2, 3, 1), np.zeros((1, 3, 1), np.uint8)))


def test_write_region_into_existing(raster):
    path, data = raster
    patch = np.full((2, 3, 3), 7, np.uint16)
    write_region(path, PixelBuffer(ImageRegion(4, 5, 3, 2), patch))
    data[5:7, 4:7] = patch
    assert np.array_equal(load_array(path), data)


class _FullDisk:
    def seek(self, offset):
        pass

    def write(self, data):
        raise OSError(28, "No space left on device")

    def close(self):
        pass


def test_disk_full_names_region(tmp_path):
    w = RasterWriter(tmp_path / "f.rfraw", RasterHeader(8, 8, 1, "u8"))
    w._file.close()
    w._file = _FullDisk()
    region = ImageRegion(0, 3, 8, 2)
    with pytest.raises(RasterIOError, match=r"rows \[3,5\)"):
        w.write_region(PixelBuffer(region, np.zeros((2, 8, 1), np.uint8)))
