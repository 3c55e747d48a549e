"""Sample positions and patch extraction into a row-stacked patch image.

A patch of size ``S`` around position ``p`` spans ``[p - (S-1)//2, p - (S-1)//2 + S)``
per axis, so even sizes lean toward the top-left, like serving windows do.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RegionError, SamplingError
from .geometry import GeoInfo, ImageRegion
from .rfraw import DTYPES, RasterReader, save_array


@dataclass(frozen=True)
class GridSampling:
    step: int

    def __post_init__(self):
        if self.step < 1:
            raise SamplingError(f"grid step must be at least 1, got {self.step}")


@dataclass(frozen=True)
class RandomSampling:
    count: int
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise SamplingError(f"sample count must be non-negative, got {self.count}")


@dataclass(frozen=True)
class FileSampling:
    path: str


def parse_strategy(text: str, seed: int = 0):
    """``grid:STEP``, ``random:COUNT`` or ``file:PATH``."""
    kind, _, arg = text.partition(":")
    try:
        if kind == "grid":
            return GridSampling(int(arg))
        if kind == "random":
            return RandomSampling(int(arg), seed)
    except ValueError:
        raise SamplingError(f"bad sampling strategy {text!r}") from None
    if kind == "file" and arg:
        return FileSampling(arg)
    raise SamplingError(f"bad sampling strategy {text!r}; expected grid:STEP, random:COUNT or file:PATH")


def patch_offset(size: int) -> int:
    return (size - 1) // 2


def patch_window(position, patch_size) -> ImageRegion:
    col, row = position
    rows, cols = patch_size
    return ImageRegion(col - patch_offset(cols), row - patch_offset(rows), cols, rows)


def admissible_range(length: int, size: int) -> range:
    """Positions on one axis whose centered patch lies inside ``[0, length)``."""
    off = patch_offset(size)
    return range(off, length - size + off + 1)


@dataclass
class SamplePositions:
    """``(col, row)`` pixel positions, optionally labelled, in a fixed order."""

    positions: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, np.int64).reshape(-1, 2)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, np.int64)
            if len(self.labels) != len(self.positions):
                raise SamplingError(f"{len(self.labels)} labels for {len(self.positions)} positions")

    def __len__(self):
        return len(self.positions)

    def windows(self, patch_size):
        return [patch_window(p, patch_size) for p in self.positions.tolist()]

    def check_bounds(self, rows, cols, patch_size):
        bounds = ImageRegion.full(rows, cols)
        bad = [i for i, w in enumerate(self.windows(patch_size)) if not bounds.contains(w)]
        if bad:
            shown = ", ".join(f"#{i} {tuple(self.positions[i].tolist())}" for i in bad[:5])
            more = f" and {len(bad) - 5} more" if len(bad) > 5 else ""
            raise RegionError(f"patch {patch_size[0]}x{patch_size[1]} leaves the {rows}x{cols} image "
                              f"at positions {shown}{more}")


def read_position_file(path) -> SamplePositions:
    """Parse ``col row [label]`` lines; ``#`` starts a comment."""
    positions, labels = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SamplingError(f"cannot read position file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split("#", 1)[0].split()
        if not fields:
            continue
        if len(fields) not in (2, 3):
            raise SamplingError(f"{path}:{lineno}: expected 'col row [label]', got {line.strip()!r}")
        try:
            values = [int(v) for v in fields]
        except ValueError:
            raise SamplingError(f"{path}:{lineno}: non-integer field in {line.strip()!r}") from None
        if min(values) < 0:
            raise SamplingError(f"{path}:{lineno}: negative value in {line.strip()!r}")
        positions.append(values[:2])
        labels.append(values[2] if len(values) == 3 else None)
    has_label = {lab is not None for lab in labels}
    if len(has_label) > 1:
        raise SamplingError(f"{path}: either every position has a label or none does")
    return SamplePositions(np.array(positions, np.int64).reshape(-1, 2),
                           np.array(labels) if has_label == {True} else None)


def select_positions(rows: int, cols: int, patch_size, strategy) -> SamplePositions:
    """Positions on a ``rows x cols`` image whose centered patches fit."""
    row_range = admissible_range(rows, patch_size[0])
    col_range = admissible_range(cols, patch_size[1])
    if isinstance(strategy, FileSampling):
        found = read_position_file(strategy.path)
        found.check_bounds(rows, cols, patch_size)
        return found
    n_admissible = len(row_range) * len(col_range)
    if isinstance(strategy, GridSampling):
        if n_admissible == 0:
            raise SamplingError(f"a {patch_size[0]}x{patch_size[1]} patch does not fit a {rows}x{cols} image")
        rr, cc = np.meshgrid(row_range[::strategy.step], col_range[::strategy.step], indexing="ij")
        return SamplePositions(np.stack([cc.ravel(), rr.ravel()], axis=1))
    if isinstance(strategy, RandomSampling):
        if strategy.count > n_admissible:
            raise SamplingError(f"{strategy.count} samples requested, only {n_admissible} admissible positions "
                                f"for a {patch_size[0]}x{patch_size[1]} patch on {rows}x{cols}")
        rng = np.random.default_rng(strategy.seed)
        flat = np.sort(rng.choice(n_admissible, strategy.count, replace=False))
        r, c = np.divmod(flat, max(len(col_range), 1))
        return SamplePositions(np.stack([c + col_range.start, r + row_range.start], axis=1))
    raise TypeError(f"unknown sampling strategy {strategy!r}")


@dataclass
class PatchImage:
    """``count`` patches of ``patch_size`` stacked along rows."""

    data: np.ndarray
    patch_size: tuple

    def __post_init__(self):
        if self.data.shape[0] % self.patch_size[0] or self.data.shape[1] != self.patch_size[1]:
            raise ValueError(f"{self.data.shape} is not a stack of {self.patch_size} patches")

    @property
    def count(self):
        return self.data.shape[0] // self.patch_size[0]

    def patch(self, i) -> np.ndarray:
        s = self.patch_size[0]
        return self.data[i * s:(i + 1) * s]

    def save(self, path):
        save_array(path, self.data, GeoInfo())


def extract_patches(image, positions: SamplePositions, patch_size) -> PatchImage:
    """Copy each position's window into a row-stacked :class:`PatchImage`.

    ``image`` is a raster path, an open :class:`RasterReader` or a
    ``(rows, cols[, channels])`` array.
    """
    if isinstance(image, np.ndarray):
        arr = image if image.ndim == 3 else image[..., None]
        return _stack(positions, patch_size, arr.shape, arr.dtype,
                      lambda w: arr[w.row:w.row_end, w.col:w.col_end])
    if isinstance(image, RasterReader):
        return _stack_from_reader(image, positions, patch_size)
    with RasterReader(image) as reader:
        return _stack_from_reader(reader, positions, patch_size)


def _stack_from_reader(reader, positions, patch_size):
    h = reader.header
    return _stack(positions, patch_size, (h.rows, h.cols, h.channels), DTYPES[h.dtype],
                  lambda w: reader.read_region(w).data)


def _stack(positions, patch_size, shape, dtype, read):
    rows, cols, channels = shape
    positions.check_bounds(rows, cols, patch_size)
    sr = patch_size[0]
    out = np.empty((len(positions) * sr, patch_size[1], channels), dtype)
    for i, window in enumerate(positions.windows(patch_size)):
        out[i * sr:(i + 1) * sr] = read(window)
    return PatchImage(out, tuple(patch_size))


def label_image(positions: SamplePositions) -> PatchImage:
    """Labels as an ``n x 1 x 1`` u16 patch image."""
    if positions.labels is None:
        raise SamplingError("positions carry no labels")
    if len(positions.labels) and positions.labels.max() > np.iinfo(np.uint16).max:
        raise SamplingError("labels must fit in 16 bits")
    return PatchImage(positions.labels.astype(np.uint16).reshape(-1, 1, 1), (1, 1))
