import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfstream.bench import BenchRow, fits_by_strategy, input_size_for, linear_fit_r2, run_benchmark, write_csv
from rfstream.geometry import FieldSpec, compute_output_size
from rfstream.netgraph import fcn80_graph
from rfstream.pipeline import Striped, Whole


@pytest.mark.parametrize("out, r, e", [(2048, 80, 16), (256, 80, 16), (17, 5, 4), (9, 1, 1)])
def test_input_size_yields_requested_output(out, r, e):
    spec = FieldSpec.single(r, e)
    n = input_size_for(out, spec)
    got = compute_output_size((n, n), spec)[0]
    assert out <= got < out + e
    assert compute_output_size((n - 1, n - 1), spec)[0] < out


def test_r2_of_exact_line():
    assert linear_fit_r2([1, 2, 3, 4], [3, 5, 7, 9]) == pytest.approx(1.0)


def test_r2_single_size_undefined():
    assert linear_fit_r2([4, 4], [1.0, 2.0]) is None


@given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(0, 100)), min_size=3, max_size=20))
def test_r2_equals_squared_correlation(points):
    x, y = np.array(points).T
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-6:
        return
    assert linear_fit_r2(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1] ** 2, abs=1e-6)


def test_csv_schema():
    buf = io.StringIO()
    write_csv([BenchRow(4096, "whole", 64, 0.5, 1234)], buf)
    assert buf.getvalue().splitlines() == ["pixels,strategy,stripe,seconds,peak_bytes", "4096,whole,64,0.500000,1234"]


def test_fits_grouped_per_strategy():
    rows = [BenchRow(p, s, 1, p * k, 0) for s, k in (("a", 1.0), ("b", 2.0)) for p in (10, 20, 40)]
    assert fits_by_strategy(rows) == {"a": pytest.approx(1.0), "b": pytest.approx(1.0)}


def test_run_benchmark_rows():
    rows = run_benchmark(fcn80_graph(), [32, 48], [Whole(), Striped(16)], repeats=1)
    assert [(r.pixels, r.strategy) for r in rows] == [
        (32 * 32, "whole"), (32 * 32, "striped:16"), (48 * 48, "whole"), (48 * 48, "striped:16")]
    assert [r.stripe for r in rows] == [32, 16, 48, 16]
    assert all(r.seconds > 0 and r.peak_bytes > 0 for r in rows)
