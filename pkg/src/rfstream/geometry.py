"""Region and pixel-grid arithmetic.

All functions here are pure. Axis conventions: regions carry ``(col, row)``
indices and ``(cols, rows)`` sizes, field tuples are ``(rows, cols)``. Geo
origins refer to the center of pixel (0, 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

from .errors import AlignmentError, SpecError

# Alignment tolerance, as a fraction of the finer spacing.
GRID_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ImageRegion:
    """Rectangular pixel region: top-left index plus size."""

    col: int = 0
    row: int = 0
    cols: int = 0
    rows: int = 0

    def __post_init__(self):
        if self.cols < 0 or self.rows < 0:
            raise ValueError(f"negative region size {self.cols}x{self.rows}")

    @classmethod
    def from_spans(cls, row_span, col_span):
        (r0, r1), (c0, c1) = row_span, col_span
        return cls(c0, r0, max(c1 - c0, 0), max(r1 - r0, 0))

    @classmethod
    def full(cls, rows, cols):
        return cls(0, 0, cols, rows)

    @property
    def row_end(self):
        return self.row + self.rows

    @property
    def col_end(self):
        return self.col + self.cols

    @property
    def npixels(self):
        return self.rows * self.cols

    def is_empty(self):
        return self.rows == 0 or self.cols == 0

    def intersection(self, other: ImageRegion) -> ImageRegion:
        if self.is_empty() or other.is_empty():
            return ImageRegion()
        r0, r1 = max(self.row, other.row), min(self.row_end, other.row_end)
        c0, c1 = max(self.col, other.col), min(self.col_end, other.col_end)
        if r1 <= r0 or c1 <= c0:
            return ImageRegion()
        return ImageRegion.from_spans((r0, r1), (c0, c1))

    def union(self, other: ImageRegion) -> ImageRegion:
        """Bounding region of both; empty operands are ignored."""
        if self.is_empty():
            return other
        if other.is_empty():
            return self
        return ImageRegion.from_spans(
            (min(self.row, other.row), max(self.row_end, other.row_end)),
            (min(self.col, other.col), max(self.col_end, other.col_end)),
        )

    def contains(self, other: ImageRegion) -> bool:
        if other.is_empty():
            return True
        return (
            self.row <= other.row
            and self.col <= other.col
            and other.row_end <= self.row_end
            and other.col_end <= self.col_end
        )

    def shifted(self, drow: int, dcol: int) -> ImageRegion:
        return ImageRegion(self.col + dcol, self.row + drow, self.cols, self.rows)

    def slices(self, origin: ImageRegion | None = None):
        """Array slices selecting this region inside a buffer holding ``origin``."""
        r, c = self.row, self.col
        if origin is not None:
            r, c = r - origin.row, c - origin.col
        return slice(r, r + self.rows), slice(c, c + self.cols)

    def __str__(self):
        return f"rows [{self.row},{self.row_end}) cols [{self.col},{self.col_end})"


@dataclass(frozen=True)
class GeoInfo:
    """Physical placement of a pixel grid.

    ``origin_x``/``origin_y`` locate the center of pixel (0, 0); spacings are
    signed (north-up images usually have a negative ``spacing_y``).
    """

    origin_x: float = 0.0
    origin_y: float = 0.0
    spacing_x: float = 1.0
    spacing_y: float = 1.0
    projection: str = ""

    def __post_init__(self):
        if self.spacing_x == 0 or self.spacing_y == 0:
            raise ValueError("spacing components must be nonzero")

    def axis(self, axis: int):
        """``(corner, spacing)`` of the rows (0) or cols (1) axis."""
        if axis == 0:
            return self.origin_y - self.spacing_y / 2, self.spacing_y
        return self.origin_x - self.spacing_x / 2, self.spacing_x

    def shifted(self, drow: float, dcol: float) -> GeoInfo:
        """Same grid with the origin moved by a (possibly fractional) pixel offset."""
        return GeoInfo(
            self.origin_x + dcol * self.spacing_x,
            self.origin_y + drow * self.spacing_y,
            self.spacing_x,
            self.spacing_y,
            self.projection,
        )

    def aligned_with(self, other: GeoInfo) -> bool:
        if self.projection != other.projection:
            return False
        return all(_axis_aligned(self.axis(a), other.axis(a)) for a in (0, 1))


def _near_integer(x: float, tol: float) -> bool:
    return abs(x - round(x)) <= tol


def _axis_aligned(a, b) -> bool:
    (ca, sa), (cb, sb) = a, b
    if (sa > 0) != (sb > 0):
        return False
    fine, coarse = sorted((abs(sa), abs(sb)))
    return _near_integer(coarse / fine, GRID_TOLERANCE) and _near_integer(
        (ca - cb) / fine, GRID_TOLERANCE
    )


def _as_fraction(value) -> Fraction:
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 16)
    return Fraction(value)


def _pair(value):
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise SpecError(f"expected a (rows, cols) pair, got {value!r}")
        return tuple(value)
    return (value, value)


@dataclass(frozen=True, eq=True)
class FieldSpec:
    """Receptive/expression field and scale factor of a model output.

    ``receptive_fields`` maps every bound input to its ``(rows, cols)`` window
    for one expression block; ``scale_factor`` is output spacing over the
    reference input spacing. The per-axis input step between consecutive
    blocks, ``expression_field * scale_factor``, must be a positive integer.
    """

    receptive_fields: Mapping[str, tuple]
    expression_field: tuple
    scale_factor: tuple = (Fraction(1), Fraction(1))
    reference_input: str = "input"

    def __post_init__(self):
        rfs = {}
        for name, rf in dict(self.receptive_fields).items():
            rf = tuple(int(v) for v in _pair(rf))
            if min(rf) < 1:
                raise SpecError(f"receptive field of {name!r} must be positive, got {rf}")
            rfs[name] = rf
        if self.reference_input not in rfs:
            raise SpecError(f"reference input {self.reference_input!r} has no receptive field")
        ef = tuple(int(v) for v in _pair(self.expression_field))
        if min(ef) < 1:
            raise SpecError(f"expression field must be positive, got {ef}")
        sf = tuple(_as_fraction(v) for v in _pair(self.scale_factor))
        if min(sf) <= 0:
            raise SpecError(f"scale factor must be positive, got {sf}")
        for e, f, axis in zip(ef, sf, ("rows", "cols")):
            if (e * f).denominator != 1:
                raise SpecError(
                    f"expression field {e} x scale factor {f} is not an integer step ({axis})"
                )
        object.__setattr__(self, "receptive_fields", rfs)
        object.__setattr__(self, "expression_field", ef)
        object.__setattr__(self, "scale_factor", sf)

    def __hash__(self):
        return hash((tuple(sorted(self.receptive_fields.items())), self.expression_field,
                     self.scale_factor, self.reference_input))

    @classmethod
    def single(cls, rf, ef, sf=1, name="input") -> FieldSpec:
        return cls({name: _pair(rf)}, _pair(ef), _pair(sf), name)

    @property
    def receptive_field(self):
        return self.receptive_fields[self.reference_input]

    @property
    def step(self):
        """Reference-input pixels between consecutive expression blocks."""
        return tuple(int(e * f) for e, f in zip(self.expression_field, self.scale_factor))

    def describe(self):
        def rc(p):
            return f"{p[0]}x{p[1]}"

        def frac(f):
            return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"

        rfs = ", ".join(f"{k}={rc(v)}" for k, v in self.receptive_fields.items())
        sf = "x".join(frac(f) for f in self.scale_factor)
        return (f"rf[{rfs}] ef={rc(self.expression_field)} sf={sf} "
                f"reference={self.reference_input}")


# ---------------------------------------------------------------- per axis


def output_length(n: int, r: int, e: int, d: int) -> int:
    if n < r:
        return 0
    return e * ((n - r) // d + 1)


def block_span(a: int, s: int, e: int):
    """Indices ``(k0, k1)`` of the first and last expression blocks touched."""
    return a // e, -(-(a + s) // e) - 1


def input_span(a: int, s: int, r: int, e: int, d: int):
    """Input ``(start, length)`` covering every block touched by ``[a, a+s)``."""
    if s <= 0:
        return 0, 0
    k0, k1 = block_span(a, s, e)
    return k0 * d, (k1 - k0) * d + r


# ---------------------------------------------------------------- operations


def compute_output_size(input_size, spec: FieldSpec):
    """Output ``(rows, cols)`` counting complete expression blocks only."""
    if min(input_size) < 0:
        raise ValueError(f"negative input size {input_size}")
    return tuple(
        output_length(n, r, e, d)
        for n, r, e, d in zip(input_size, spec.receptive_field, spec.expression_field, spec.step)
    )


def requested_input_region(output_region: ImageRegion, spec: FieldSpec) -> ImageRegion:
    """Reference-input region whose blocks cover ``output_region``.

    The result is the union of the receptive windows of every expression block
    the output region touches, so it starts on a block boundary.
    """
    if output_region.is_empty():
        return ImageRegion()
    (rr, rc), (er, ec), (dr, dc) = spec.receptive_field, spec.expression_field, spec.step
    r0, rn = input_span(output_region.row, output_region.rows, rr, er, dr)
    c0, cn = input_span(output_region.col, output_region.cols, rc, ec, dc)
    return ImageRegion(c0, r0, cn, rn)


def propagate_geo(ref_geo: GeoInfo, spec: FieldSpec) -> GeoInfo:
    """Output grid of a model applied to a reference grid.

    Each expression block is centered on its receptive window, so output
    pixel 0 sits ``(r - e*f + f - 1) / 2`` reference pixels from the
    reference origin.
    """
    (rr, rc), (fr, fc), (dr, dc) = spec.receptive_field, spec.scale_factor, spec.step
    off_r = (rr - dr + fr - 1) / 2
    off_c = (rc - dc + fc - 1) / 2
    return GeoInfo(
        ref_geo.origin_x + ref_geo.spacing_x * float(off_c),
        ref_geo.origin_y + ref_geo.spacing_y * float(off_r),
        ref_geo.spacing_x * float(fc),
        ref_geo.spacing_y * float(fr),
        ref_geo.projection,
    )


def _check_aligned(src: GeoInfo, dst: GeoInfo):
    if not src.aligned_with(dst):
        raise AlignmentError(
            f"grids are not aligned: origin ({src.origin_x}, {src.origin_y}) spacing "
            f"({src.spacing_x}, {src.spacing_y}) proj {src.projection!r} vs origin "
            f"({dst.origin_x}, {dst.origin_y}) spacing ({dst.spacing_x}, {dst.spacing_y}) "
            f"proj {dst.projection!r}"
        )


def _to_grid(coord: float, corner: float, spacing: float) -> float:
    return (coord - corner) / spacing


def _snap_floor(x: float) -> int:
    n = round(x)
    return n if abs(x - n) <= GRID_TOLERANCE else math.floor(x)


def _snap_ceil(x: float) -> int:
    n = round(x)
    return n if abs(x - n) <= GRID_TOLERANCE else math.ceil(x)


def map_region_between_grids(region: ImageRegion, src: GeoInfo, dst: GeoInfo) -> ImageRegion:
    """Smallest region of ``dst`` whose footprint covers ``region`` of ``src``."""
    _check_aligned(src, dst)
    if region.is_empty():
        return ImageRegion()
    spans = []
    for axis, (start, length) in enumerate(((region.row, region.rows), (region.col, region.cols))):
        (cs, ss), (cd, sd) = src.axis(axis), dst.axis(axis)
        a = _to_grid(cs + ss * start, cd, sd)
        b = _to_grid(cs + ss * (start + length), cd, sd)
        spans.append((_snap_floor(a), _snap_ceil(b)))
    return ImageRegion.from_spans(*spans)


def centered_window_start(ref_start: int, ref_length: int, ref_axis, sec_axis, sec_length: int) -> int:
    """Start of a ``sec_length`` window centered on a reference window.

    Axes are ``(corner, spacing)`` pairs as returned by :meth:`GeoInfo.axis`.
    Off-grid centers round toward the top-left.
    """
    (cr, sr), (cs, ss) = ref_axis, sec_axis
    center = _to_grid(cr + sr * (ref_start + ref_length / 2), cs, ss)
    return _snap_floor(center - sec_length / 2)


@dataclass(frozen=True)
class SecondaryGrid:
    """Placement of a secondary input's windows relative to the reference grid."""

    name: str
    geo: GeoInfo
    receptive_field: tuple
    ref_geo: GeoInfo = field(repr=False)
    ref_receptive_field: tuple = ()

    def window_start(self, axis: int, ref_start: int) -> int:
        return centered_window_start(
            ref_start, self.ref_receptive_field[axis], self.ref_geo.axis(axis),
            self.geo.axis(axis), self.receptive_field[axis],
        )

    def window(self, ref_window: ImageRegion) -> ImageRegion:
        r = self.window_start(0, ref_window.row)
        c = self.window_start(1, ref_window.col)
        return ImageRegion(c, r, self.receptive_field[1], self.receptive_field[0])
