"""Command-line entry point: ``rfstream serve|sample|derive-fields|benchmark``.

Exit codes: 0 success, 1 validation failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import errors
from .bench import DEFAULT_STRATEGIES, fits_by_strategy, run_benchmark, write_csv
from .geometry import FieldSpec, GeoInfo
from .netgraph import MOCK_MODELS, derive_fields, load_graph, save_graph, validate_fields
from .netgraph.graph import weights_path
from .pipeline import BufferTracker, RasterFileMapper, RasterSource, execute, parse_split
from .rfraw import DTYPES, RasterReader, save_array
from .sampling import extract_patches, label_image, parse_strategy, select_positions
from .serve import ServeConfig, ServeFilter

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2

_MODULE_OF = [
    (errors.RasterIOError, "raster-io"),
    (errors.FieldDerivationError, "netgraph"),
    (errors.GraphError, "netgraph"),
    (errors.AlignmentError, "geometry"),
    (errors.SpecError, "fields"),
    (errors.RegionError, "geometry"),
    (errors.SamplingError, "sampling"),
    (errors.PipelineError, "pipeline"),
]


class UsageError(Exception):
    pass


def _module(exc):
    return next((name for cls, name in _MODULE_OF if isinstance(exc, cls)), "rfstream")


def _pair(text, what):
    parts = text.lower().split("x")
    try:
        values = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"bad {what} {text!r}; expected RxC") from None
    if len(values) == 1:
        values *= 2
    if len(values) != 2:
        raise UsageError(f"bad {what} {text!r}; expected RxC")
    return values


def parse_fields(text: str, graph=None) -> FieldSpec | None:
    """``rf=RxC,ef=RxC,sf=N[/D]`` (single input) or ``rf.NAME=RxC,...,ref=NAME``; ``auto`` gives None."""
    if text == "auto":
        return None
    rfs, ef, sf, ref = {}, None, Fraction(1), None
    for item in text.split(","):
        key, sep, value = item.strip().partition("=")
        if not sep:
            raise UsageError(f"bad --fields item {item!r}")
        if key == "rf":
            rfs[None] = _pair(value, "receptive field")
        elif key.startswith("rf."):
            rfs[key[3:]] = _pair(value, "receptive field")
        elif key == "ef":
            ef = _pair(value, "expression field")
        elif key == "sf":
            try:
                sf = Fraction(value)
            except (ValueError, ZeroDivisionError):
                raise UsageError(f"bad scale factor {value!r}; expected N or N/D") from None
        elif key == "ref":
            ref = value
        else:
            raise UsageError(f"unknown --fields key {key!r}")
    if not rfs or ef is None:
        raise UsageError("--fields needs rf and ef (or 'auto')")
    if None in rfs:
        if len(rfs) > 1:
            raise UsageError("mix of rf= and rf.NAME= in --fields")
        name = ref or (next(iter(graph.inputs)) if graph is not None else "input")
        rfs = {name: rfs.pop(None)}
    ref = ref or next(iter(rfs))
    return FieldSpec(rfs, ef, (sf, sf), ref)


def _parse_inputs(items, graph):
    inputs = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            if len(graph.inputs) != 1:
                raise UsageError(f"--input {item!r}: name the graph input (name=path)")
            name, path = next(iter(graph.inputs)), item
        if name in inputs:
            raise UsageError(f"--input {name!r} given twice")
        inputs[name] = Path(path)
    return inputs


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _load_model(path):
    _require_file(path, "model")
    _require_file(weights_path(path), "model weights")
    return load_graph(path)


def _say(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------- commands


def cmd_serve(args):
    graph = _load_model(args.model)
    inputs = _parse_inputs(args.input, graph)
    for path in inputs.values():
        _require_file(path, "input raster")
    unknown = set(inputs) - set(graph.inputs)
    if unknown:
        raise UsageError(f"model has no input named {sorted(unknown)}; inputs are {list(graph.inputs)}")
    spec = parse_fields(args.fields, graph) or derive_fields(graph, args.reference)
    config = ServeConfig(graph, spec, args.mode, {n: n for n in inputs}, args.output_name, args.batch)
    config.validate()
    strategy = parse_split(args.split)
    sources = {n: RasterSource(p) for n, p in inputs.items()}
    try:
        mapper = RasterFileMapper(ServeFilter(config, sources), args.output, args.dtype)

        def progress(i, n, region):
            _say(args, f"region {i + 1}/{n} {region} done")

        tracker = BufferTracker()
        stats = execute(mapper, strategy, overlap=args.overlap, tracker=tracker, progress=progress)
    finally:
        for s in sources.values():
            s.close()
    info = mapper.info
    _say(args, f"fields: {spec.describe()}")
    n = len(stats.regions)
    print(f"wrote {args.output} ({info.rows}x{info.cols}x{info.channels} {mapper.target_dtype}) "
          f"in {n} region{'' if n == 1 else 's'}, {stats.seconds:.3f} s, peak {stats.peak_bytes} bytes")
    return EXIT_OK


def cmd_sample(args):
    _require_file(args.input, "input raster")
    patch = _pair(args.patch, "patch size")
    if min(patch) < 1:
        raise UsageError("patch size must be positive")
    strategy = parse_strategy(args.strategy, args.seed)
    with RasterReader(args.input) as reader:
        h = reader.header
        if patch[0] > h.rows or patch[1] > h.cols:
            raise UsageError(f"patch {patch[0]}x{patch[1]} is larger than the {h.rows}x{h.cols} image")
        positions = select_positions(h.rows, h.cols, patch, strategy)
        if len(positions) == 0:
            raise UsageError("no sample positions selected; nothing to write")
        patches = extract_patches(reader, positions, patch)
    patches.save(args.output)
    msg = f"wrote {args.output}: {patches.count} patches of {patch[0]}x{patch[1]} -> {patches.data.shape[0]}x{patch[1]}x{patches.data.shape[2]}"
    if args.labels_output:
        label_image(positions).save(args.labels_output)
        msg += f", labels in {args.labels_output}"
    print(msg)
    return EXIT_OK


def cmd_derive_fields(args):
    graph = _load_model(args.model)
    try:
        derived = derive_fields(graph, args.reference)
    except errors.FieldDerivationError as exc:
        print(f"derivation failed: {exc}")
        print("field validation: FAIL")
        return EXIT_INVALID
    print(derived.describe())
    rf, ef = derived.receptive_field, derived.expression_field
    f = derived.scale_factor
    print(f"r={rf[0]}x{rf[1]} e={ef[0]}x{ef[1]} f={f[0]}x{f[1]}")
    declared = parse_fields(args.fields, graph) if args.fields else derived
    report = validate_fields(graph, declared)
    print(report)
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_benchmark(args):
    if args.model:
        graph = _load_model(args.model)
    else:
        graph = MOCK_MODELS["fcn80"]()
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise UsageError(f"bad --sizes {args.sizes!r}") from None
    strategies = [parse_split(s) for s in args.strategies.split(",")] if args.strategies else list(DEFAULT_STRATEGIES)
    spec = parse_fields(args.fields, graph) if args.fields != "auto" else None

    def progress(row):
        _say(args, f"{row.pixels} px {row.strategy}: {row.seconds:.3f} s, peak {row.peak_bytes} B")

    rows = run_benchmark(graph, sizes, strategies, args.mode, args.repeats, args.seed, spec=spec, progress=progress)
    if args.output:
        with open(args.output, "w", newline="") as fh:
            write_csv(rows, fh)
    else:
        write_csv(rows, sys.stdout)
    report = sys.stdout if args.output else sys.stderr  # keep stdout pure CSV
    for strategy, r2 in fits_by_strategy(rows).items():
        print(f"R2 {strategy}: " + ("n/a" if r2 is None else f"{r2:.4f}"), file=report)
    return EXIT_OK


def cmd_mock_model(args):
    graph = MOCK_MODELS[args.name]()
    save_graph(graph, args.output)
    print(f"wrote {args.output} ({args.name})")
    return EXIT_OK


def cmd_random_raster(args):
    rng = np.random.default_rng(args.seed)
    shape = (args.rows, args.cols, args.channels)
    if args.dtype == "f32":
        data = rng.random(shape, dtype=np.float32)
    else:
        data = rng.integers(0, np.iinfo(DTYPES[args.dtype]).max, shape, endpoint=True).astype(DTYPES[args.dtype])
    ox, oy, sx, sy = args.geo
    save_array(args.output, data, GeoInfo(ox, oy, sx, sy))
    print(f"wrote {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="rfstream", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="no progress output")

    s = sub.add_parser("serve", parents=[common], help="apply a model to one or more rasters")
    s.add_argument("--input", action="append", required=True, metavar="NAME=PATH",
                   help="graph input name and raster path (repeatable)")
    s.add_argument("--model", required=True)
    s.add_argument("--mode", choices=("patch", "fullconv"), default="fullconv")
    s.add_argument("--fields", default="auto", help="rf=RxC,ef=RxC,sf=N[/D] or auto")
    s.add_argument("--reference", help="reference graph input for derived fields")
    s.add_argument("--split", default="whole", help="whole | striped:H | tiled:WxH | budget:BYTES")
    s.add_argument("--batch", type=int, default=64, help="patches per forward call (patch mode)")
    s.add_argument("--output", required=True)
    s.add_argument("--output-name", help="graph output to serve (default: the first)")
    s.add_argument("--dtype", choices=sorted(DTYPES), help="output element type (default f32)")
    s.add_argument("--overlap", action="store_true", help="compute the next region while writing")
    s.add_argument("--seed", type=int, default=0, help="unused by serving; accepted for uniformity")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("sample", parents=[common], help="extract patches into a row-stacked raster")
    s.add_argument("--input", required=True)
    s.add_argument("--patch", required=True, help="patch size RxC")
    s.add_argument("--strategy", default="grid:1", help="grid:STEP | random:COUNT | file:PATH")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.add_argument("--labels-output", help="n x 1 x 1 label raster (file positions with labels)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("derive-fields", parents=[common], help="print a model's fields and validation report")
    s.add_argument("--model", required=True)
    s.add_argument("--reference")
    s.add_argument("--fields", help="declared fields to validate instead of the derived ones")
    s.set_defaults(func=cmd_derive_fields)

    s = sub.add_parser("benchmark", parents=[common], help="runtime vs output size")
    s.add_argument("--model", help="model file (default: the r=80 e=16 mock)")
    s.add_argument("--sizes", default="256,512,1024,2048")
    s.add_argument("--strategies", help="comma-separated split strategies")
    s.add_argument("--mode", choices=("patch", "fullconv"), default="fullconv")
    s.add_argument("--fields", default="auto")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("mock-model", parents=[common], help="write one of the built-in synthetic models")
    s.add_argument("name", choices=sorted(MOCK_MODELS))
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_mock_model)

    s = sub.add_parser("random-raster", parents=[common], help="write a seeded random raster")
    s.add_argument("--rows", type=int, required=True)
    s.add_argument("--cols", type=int, required=True)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--dtype", choices=sorted(DTYPES), default="f32")
    s.add_argument("--geo", type=float, nargs=4, default=(0.5, -0.5, 1.0, -1.0),
                   metavar=("ORIGIN_X", "ORIGIN_Y", "SPACING_X", "SPACING_Y"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_random_raster)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rfstream {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (errors.SpecError, errors.AlignmentError) as exc:
        print(f"rfstream {args.command}: {_module(exc)}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (errors.RFStreamError, OSError, ValueError) as exc:
        print(f"rfstream {args.command}: {_module(exc)}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
