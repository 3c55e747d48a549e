"""Runtime scaling benchmark: serve synthetic rasters of growing size."""

from __future__ import annotations

import csv
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import FieldSpec, GeoInfo
from .netgraph import ModelGraph, derive_fields
from .pipeline import BufferTracker, RasterFileMapper, RasterSource, Striped, Tiled, execute
from .rfraw import save_array
from .serve import ServeConfig, ServeFilter

CSV_FIELDS = ("pixels", "strategy", "stripe", "seconds", "peak_bytes")


@dataclass
class BenchRow:
    pixels: int
    strategy: str
    stripe: int
    seconds: float
    peak_bytes: int

    def as_dict(self):
        return {"pixels": self.pixels, "strategy": self.strategy, "stripe": self.stripe,
                "seconds": f"{self.seconds:.6f}", "peak_bytes": self.peak_bytes}


def input_size_for(output_size: int, spec: FieldSpec, axis: int = 0) -> int:
    """Smallest input length giving at least ``output_size`` output pixels (whole blocks)."""
    e, d, r = spec.expression_field[axis], spec.step[axis], spec.receptive_field[axis]
    blocks = -(-output_size // e)
    return r + (blocks - 1) * d


def synthetic_raster(path, rows, cols, channels, seed, geo=GeoInfo()):
    rng = np.random.default_rng(seed)
    save_array(path, rng.random((rows, cols, channels), dtype=np.float32), geo)


def _stripe_height(regions):
    return regions[0].rows if regions else 0


def serve_once(graph: ModelGraph, spec: FieldSpec, mode, strategy, in_path, out_path, batch=64):
    """One serve run from raster to raster; returns ``(seconds, peak_bytes, regions)``."""
    source = RasterSource(in_path)
    try:
        name = spec.reference_input
        mapper = RasterFileMapper(ServeFilter(ServeConfig(graph, spec, mode, batch_size=batch), {name: source}), out_path)
        tracker = BufferTracker()
        start = time.perf_counter()
        stats = execute(mapper, strategy, tracker=tracker)
        return time.perf_counter() - start, tracker.peak, stats.regions
    finally:
        source.close()


def run_benchmark(graph: ModelGraph, sizes, strategies, mode="fullconv", repeats=3, seed=0,
                  workdir=None, spec=None, progress=None):
    """Serve square outputs of each size with each strategy; keep the fastest repeat."""
    spec = spec or derive_fields(graph)
    if len(graph.inputs) != 1:
        raise ValueError("the benchmark serves single-input graphs")
    channels = graph.input_channels(spec.reference_input)
    rows = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        for size in sizes:
            n = input_size_for(size, spec)
            src = tmp / f"input_{size}.rfraw"
            synthetic_raster(src, n, n, channels, seed + size)
            for strategy in strategies:
                best = None
                for _ in range(repeats):
                    seconds, peak, regions = serve_once(graph, spec, mode, strategy, src, tmp / "out.rfraw")
                    if best is None or seconds < best[0]:
                        best = (seconds, peak, regions)
                seconds, peak, regions = best
                pixels = sum(r.npixels for r in regions)
                row = BenchRow(pixels, str(strategy), _stripe_height(regions), seconds, peak)
                rows.append(row)
                if progress is not None:
                    progress(row)
            src.unlink()
    return rows


def linear_fit_r2(pixels, seconds):
    """Coefficient of determination of a least-squares line; ``None`` below two sizes."""
    x, y = np.asarray(pixels, float), np.asarray(seconds, float)
    if len(np.unique(x)) < 2:
        return None
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot


def fits_by_strategy(rows):
    by = {}
    for row in rows:
        by.setdefault(row.strategy, []).append(row)
    return {s: linear_fit_r2([r.pixels for r in rs], [r.seconds for r in rs]) for s, rs in by.items()}


def write_csv(rows, fh):
    writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.as_dict())


DEFAULT_STRATEGIES = (Striped(64), Tiled(256, 256))
