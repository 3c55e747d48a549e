import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfstream.errors import PipelineError, RasterIOError, RegionError
from rfstream.geometry import GeoInfo, ImageRegion
from rfstream.netgraph import derive_fields, fcn80_graph
from rfstream.pipeline import (
    ArrayMapper,
    ArraySource,
    BufferTracker,
    ChannelDuplicateFilter,
    IdentityFilter,
    ImageInfo,
    MemoryBudget,
    ProcessObject,
    RasterFileMapper,
    RasterSource,
    Striped,
    Tiled,
    Whole,
    estimate_footprint,
    execute,
    parse_split,
    split_output,
)
from rfstream.rfraw import save_array
from rfstream.serve import ServeConfig, ServeFilter


def spans(regions):
    return [(r.row, r.row_end, r.col, r.col_end) for r in regions]


def test_striped_split():
    got = split_output(ImageInfo(100, 100, 1), Striped(40))
    assert spans(got) == [(0, 40, 0, 100), (40, 80, 0, 100), (80, 100, 0, 100)]


def test_tiled_split():
    got = split_output(ImageInfo(100, 100, 1), Tiled(64, 64))
    assert [(r.rows, r.cols) for r in got] == [(64, 64), (64, 36), (36, 64), (36, 36)]


def test_budget_split_formula():
    got = split_output(ImageInfo(1000, 1000, 1), MemoryBudget(8 * 2**20), footprint=400)
    assert got[0].rows == 20 and len(got) == 50


def test_budget_too_small_warns():
    with pytest.warns(UserWarning):
        got = split_output(ImageInfo(10, 1000, 1), MemoryBudget(100), footprint=400)
    assert all(r.rows == 1 for r in got)


@pytest.mark.parametrize("bad", [lambda: Striped(0), lambda: Tiled(0, 3), lambda: MemoryBudget(0)])
def test_strategy_dimensions_positive(bad):
    with pytest.raises(ValueError):
        bad()


@pytest.mark.parametrize("text, want", [
    ("whole", Whole()), ("striped:16", Striped(16)), ("tiled:32x8", Tiled(32, 8)),
    ("budget:4096", MemoryBudget(4096)),
])
def test_parse_split(text, want):
    assert parse_split(text) == want


def test_parse_split_rejects_garbage():
    with pytest.raises(ValueError):
        parse_split("stripes:4")


@given(st.integers(1, 60), st.integers(1, 60), st.integers(1, 70), st.integers(1, 70))
def test_split_is_partition(rows, cols, w, h):
    info = ImageInfo(rows, cols, 1)
    for strategy in (Striped(h), Tiled(w, h), Whole()):
        cover = np.zeros((rows, cols), int)
        for r in split_output(info, strategy):
            cover[r.slices()] += 1
        assert np.all(cover == 1)


# ---------------------------------------------------------------- information


def test_identity_info():
    m = ArrayMapper(IdentityFilter(ArraySource(np.zeros((100, 100, 1), np.float32))))
    info = m.update_output_information()
    assert (info.rows, info.cols) == (100, 100)


def test_serve_filter_info():
    src = ArraySource(np.zeros((100, 100, 4), np.float32))
    g = fcn80_graph()
    m = ArrayMapper(ServeFilter(ServeConfig(g, derive_fields(g)), {"input": src}))
    assert m.update_output_information().size == (32, 32, 2)


def test_zero_sized_header(tmp_path):
    path = tmp_path / "z.rfraw"
    path.write_bytes(b"")
    path.with_name("z.rfraw.json").write_text(
        '{"cols": 0, "rows": 5, "channels": 1, "dtype": "u8", "origin_x": 0, "origin_y": 0,'
        ' "spacing_x": 1, "spacing_y": 1, "projection": ""}')
    with pytest.raises(RasterIOError, match="positive"):
        ArrayMapper(RasterSource(path)).update_output_information()


class Loop(ProcessObject):
    def generate_output_information(self, infos):
        return infos[0]


def test_cycle_detected():
    a = Loop()
    b = Loop(a)
    a.inputs.append(b)
    with pytest.raises(PipelineError, match="cycle"):
        ArrayMapper(b).update_output_information()


# ---------------------------------------------------------------- execution


@pytest.mark.parametrize("strategy", [Whole(), Striped(7), Tiled(13, 5), MemoryBudget(3000)])
def test_identity_pipeline_file_equal(tmp_path, rng, strategy):
    data = rng.integers(0, 255, (37, 29, 3)).astype(np.uint8)
    save_array(tmp_path / "in.rfraw", data, GeoInfo(10, 20, 2, -2))
    src = RasterSource(tmp_path / "in.rfraw")
    mapper = RasterFileMapper(IdentityFilter(src), tmp_path / "out.rfraw", checked=True)
    execute(mapper, strategy)
    src.close()
    assert (tmp_path / "out.rfraw").read_bytes() == (tmp_path / "in.rfraw").read_bytes()


def test_source_to_mapper_without_filter(rng):
    data = rng.random((11, 9, 2), dtype=np.float32)
    m = ArrayMapper(ArraySource(data))
    execute(m, Striped(4))
    assert np.array_equal(m.result, data)


def test_every_pixel_written_once(rng):
    m = ArrayMapper(ChannelDuplicateFilter(ArraySource(rng.random((40, 33, 2), dtype=np.float32))))
    execute(m, Tiled(7, 9))
    assert np.all(m.writes == 1)


def test_serve_striped_equals_whole(rng):
    x = rng.random((512, 512, 4), dtype=np.float32)
    g = fcn80_graph()
    spec = derive_fields(g)
    outs = []
    for strategy in (Whole(), Striped(16)):
        m = ArrayMapper(ServeFilter(ServeConfig(g, spec), {"input": ArraySource(x)}))
        execute(m, strategy)
        outs.append(m.result)
    assert outs[0].shape == (448, 448, 2)
    assert np.array_equal(outs[0], outs[1])


def test_empty_output_writes_nothing(tmp_path):
    g = fcn80_graph()
    src = ArraySource(np.zeros((50, 50, 4), np.float32))
    m = RasterFileMapper(ServeFilter(ServeConfig(g, derive_fields(g)), {"input": src}), tmp_path / "o.rfraw")
    stats = execute(m, Striped(4))
    assert stats.regions == [] and not (tmp_path / "o.rfraw").exists()


def test_source_rejects_out_of_bounds():
    src = ArraySource(np.zeros((5, 5, 1), np.float32))
    src.update_output_information()
    with pytest.raises(RegionError):
        src.produce(ImageRegion(3, 0, 3, 1), BufferTracker())


class WrongRegion(IdentityFilter):
    pass_through = False

    def compute(self, region, buffers, tracker):
        buf = buffers[0]
        return type(buf)(region.shifted(0, 0) if region.rows < 2 else ImageRegion(0, 0, 1, 1),
                         buf.data[:1, :1] if region.rows >= 2 else buf.data)


def test_wrong_region_is_contract_violation():
    m = ArrayMapper(WrongRegion(ArraySource(np.zeros((6, 6, 1), np.float32))))
    with pytest.raises(PipelineError, match="requested"):
        execute(m, Striped(3))


def test_io_failure_names_region(tmp_path, rng):
    save_array(tmp_path / "in.rfraw", rng.random((20, 10, 1), dtype=np.float32))
    src = RasterSource(tmp_path / "in.rfraw")
    m = ArrayMapper(src)
    m.update_output_information()
    (tmp_path / "in.rfraw").write_bytes(b"\0" * 100)  # truncated behind the reader's back
    with pytest.raises(PipelineError, match=r"region \d+ \(rows \["):
        execute(m, Striped(5))
    src.close()


def test_sources_read_exactly_requested(rng):
    src = ArraySource(rng.random((120, 90, 4), dtype=np.float32))
    g = fcn80_graph()
    m = ArrayMapper(ServeFilter(ServeConfig(g, derive_fields(g)), {"input": src}))
    execute(m, Striped(16))  # three 16-row output blocks, one 80-row window each
    assert [(r.row, r.rows) for r in src.requests] == [(0, 80), (16, 80), (32, 80)]
    assert all(r.cols == 80 for r in src.requests)


@pytest.mark.parametrize("overlap", [False, True])
def test_overlap_mode_equals_sequential(rng, overlap):
    x = rng.random((200, 150, 4), dtype=np.float32)
    g = fcn80_graph()
    m = ArrayMapper(ServeFilter(ServeConfig(g, derive_fields(g)), {"input": ArraySource(x)}))
    execute(m, Tiled(48, 32), overlap=overlap)
    ref = ArrayMapper(ServeFilter(ServeConfig(g, derive_fields(g)), {"input": ArraySource(x)}))
    execute(ref, Whole())
    assert np.array_equal(m.result, ref.result)


def test_overlap_mode_propagates_errors(rng):
    m = ArrayMapper(WrongRegion(ArraySource(np.zeros((12, 6, 1), np.float32))))
    with pytest.raises(PipelineError):
        execute(m, Striped(3), overlap=True)


# ---------------------------------------------------------------- accounting


def test_footprint_identity():
    m = ArrayMapper(IdentityFilter(ArraySource(np.zeros((8, 8, 4), np.float32))))
    m.update_output_information()
    assert estimate_footprint(m) == 32


def test_footprint_source_to_mapper():
    m = ArrayMapper(ArraySource(np.zeros((8, 8, 4), np.float32)))
    m.update_output_information()
    assert estimate_footprint(m) == 32


def test_footprint_channel_doubler():
    m = ArrayMapper(ChannelDuplicateFilter(ArraySource(np.zeros((8, 8, 4), np.float32))))
    m.update_output_information()
    assert estimate_footprint(m) == 80


@pytest.mark.parametrize("strategy", [Whole(), Striped(5), Tiled(9, 4)])
def test_predicted_peak_matches_tracked(rng, strategy):
    m = ArrayMapper(ChannelDuplicateFilter(ArraySource(rng.random((23, 17, 3), dtype=np.float32))), "u16")
    tracker = BufferTracker()
    stats = execute(m, strategy, tracker=tracker)
    assert tracker.peak == max(m.region_bytes(r) for r in stats.regions)
    assert tracker.current == 0


def test_budget_strategy_bounds_peak(rng):
    x = rng.random((300, 260, 4), dtype=np.float32)
    g = fcn80_graph()
    for budget in (400_000, 800_000):
        m = ArrayMapper(ServeFilter(ServeConfig(g, derive_fields(g)), {"input": ArraySource(x)}))
        tracker = BufferTracker()
        stats = execute(m, MemoryBudget(budget), tracker=tracker)
        assert tracker.peak <= budget
        assert len(stats.regions) > 1
