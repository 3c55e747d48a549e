"""Receptive/expression field derivation from a graph, and the checks built on it.

Derivation tracks, per axis and per node, which input pixels every feature
pixel depends on. Valid-padded ops make that dependency periodic: shifting a
feature map by ``Q`` pixels shifts its dependencies by ``P`` input pixels,
so the bounding interval of ``Q`` consecutive pixels describes the node
completely. Transposed convolutions divide the jump ``P/Q`` by their stride,
which is what gives expression fields larger than one pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..errors import FieldDerivationError, GraphError
from ..geometry import FieldSpec
from .forward import forward, infer_shapes
from .graph import ModelGraph


@dataclass(frozen=True)
class AxisPattern:
    """Dependency bounds of feature pixels ``0..Q-1``; later pixels repeat with shift ``P``."""

    P: int
    Q: int
    lo: tuple
    hi: tuple

    @property
    def jump(self):
        return Fraction(self.P, self.Q)

    def at(self, y):
        q, m = divmod(y, self.Q)
        if self.lo[m] is None:
            return None, None
        return self.lo[m] + q * self.P, self.hi[m] + q * self.P

    def expand(self, q_new):
        reps = q_new // self.Q
        lo, hi = zip(*(self.at(y) for y in range(q_new)))
        return AxisPattern(self.P * reps, q_new, lo, hi)


def _union(bounds):
    bounds = [b for b in bounds if b[0] is not None]
    if not bounds:
        return None, None
    return min(b[0] for b in bounds), max(b[1] for b in bounds)


def _windowed(pat: AxisPattern, k, s):
    q_new = pat.Q // math.gcd(pat.Q, s)
    p_new = pat.P * s * q_new // pat.Q
    lo, hi = zip(*(_union(pat.at(x) for x in range(y * s, y * s + k)) for y in range(q_new)))
    return AxisPattern(p_new, q_new, lo, hi)


def _transposed(pat: AxisPattern, k, s):
    crop = max(k - s, 0)
    q_new = pat.Q * s
    bounds = []
    for y in range(q_new):
        first, last = -(-(y + crop - k + 1) // s), (y + crop) // s
        bounds.append(_union(pat.at(x) for x in range(max(first, 0), last + 1)))
    lo, hi = zip(*bounds)
    return AxisPattern(pat.P, q_new, lo, hi)


def _merge(nid, pats):
    pats = [p for p in pats if p is not None]
    if not pats:
        return None
    jumps = {p.jump for p in pats}
    if len(jumps) > 1:
        raise FieldDerivationError(f"node {nid!r}: branches merge with inconsistent jumps {sorted(jumps)}")
    q_new = math.lcm(*(p.Q for p in pats))
    pats = [p.expand(q_new) for p in pats]
    lo, hi = zip(*(_union(p.at(y) for p in pats) for y in range(q_new)))
    return AxisPattern(pats[0].P, q_new, lo, hi)


def axis_patterns(graph: ModelGraph, input_name: str, output: str | None = None):
    """``(rows_pattern, cols_pattern)`` of an output's dependency on one input."""
    source = graph.inputs[input_name]
    target = graph.output_node(output)
    states = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        if node.op == "Input":
            states[nid] = (AxisPattern(1, 1, (0,), (0,)),) * 2 if nid == source else None
            continue
        args = [states[s] for s in node.inputs]
        if node.op in ("ConcatChannels", "Add"):
            per_axis = [_merge(nid, [a[i] if a else None for a in args]) for i in (0, 1)]
            states[nid] = None if per_axis[0] is None else tuple(per_axis)
            continue
        prev = args[0]
        if prev is None or node.op == "Activation":
            states[nid] = prev
            continue
        if node.op == "Conv2D" and node.params.get("padding", "valid") != "valid":
            raise FieldDerivationError(
                f"node {nid!r}: 'same' padding breaks streamed/whole equivalence; use valid padding"
            )
        (kh, kw), (sr, sc) = node.kernel(), node.stride()
        fn = _transposed if node.op == "TransposedConv2D" else _windowed
        states[nid] = (fn(prev[0], kh, sr), fn(prev[1], kw, sc))
    if states[target] is None:
        raise FieldDerivationError(f"output does not depend on input {input_name!r}")
    return states[target]


def _is_period(pat: AxisPattern, e, d):
    for y in range(pat.Q):
        a, b = pat.at(y), pat.at(y + e)
        if (a[0] is None) != (b[0] is None):
            return False
        if a[0] is not None and (b[0] != a[0] + d or b[1] != a[1] + d):
            return False
    return True


def minimal_expression(pat: AxisPattern):
    """Smallest block length ``e`` with integer step ``e*f`` the pattern repeats on."""
    f = pat.jump
    for e in range(1, pat.Q + 1):
        if pat.Q % e or (e * f).denominator != 1:
            continue
        if _is_period(pat, e, int(e * f)):
            return e
    raise FieldDerivationError("dependency pattern has no integer period")  # unreachable: Q works


def block_window(pat: AxisPattern, e):
    """Bounding ``(lo, hi)`` of block 0's dependencies (inclusive)."""
    lo, hi = _union(pat.at(y) for y in range(e))
    if lo is None:
        raise FieldDerivationError("expression block depends on no input pixel")
    return lo, hi


def derive_fields(graph: ModelGraph, reference_input: str | None = None, output: str | None = None) -> FieldSpec:
    """Receptive fields, expression field and scale factor implied by the graph."""
    if reference_input is None:
        reference_input = next(iter(graph.inputs))
    if reference_input not in graph.inputs:
        raise GraphError(f"unknown graph input {reference_input!r}")
    ref = axis_patterns(graph, reference_input, output)
    ef = tuple(minimal_expression(p) for p in ref)
    rfs = {}
    for name in graph.inputs:
        try:
            pats = ref if name == reference_input else axis_patterns(graph, name, output)
        except FieldDerivationError:
            if name == reference_input:
                raise
            continue
        window = []
        for pat, e in zip(pats, ef):
            if (e * pat.jump).denominator != 1 or not _is_period(pat, e, int(e * pat.jump)):
                raise FieldDerivationError(
                    f"input {name!r} does not repeat on the reference expression field {ef}"
                )
            lo, hi = block_window(pat, e)
            if name == reference_input and lo != 0:
                raise FieldDerivationError(f"block window of {name!r} starts at {lo}, not 0")
            window.append(hi - lo + 1)
        rfs[name] = tuple(window)
    return FieldSpec(rfs, ef, tuple(p.jump for p in ref), reference_input)


def input_steps(graph: ModelGraph, spec: FieldSpec, output: str | None = None) -> dict:
    """Per-input pixel step between consecutive expression blocks, from the graph."""
    steps = {}
    for name in spec.receptive_fields:
        try:
            pats = axis_patterns(graph, name, output)
        except (FieldDerivationError, KeyError):
            continue
        steps[name] = tuple(e * p.jump for p, e in zip(pats, spec.expression_field))
    return steps


@dataclass
class FieldReport:
    passed: bool
    lines: list = field(default_factory=list)
    derived: FieldSpec | None = None

    def __str__(self):
        head = "PASS" if self.passed else "FAIL"
        return "\n".join([f"field validation: {head}"] + [f"  {ln}" for ln in self.lines])


def _fmt(pair):
    return "x".join(str(v) for v in pair)


def validate_fields(graph: ModelGraph, declared: FieldSpec, output: str | None = None) -> FieldReport:
    """Check a declared spec against the graph by execution and by derivation.

    The graph is run on inputs of one and two blocks' worth of pixels; it must
    yield one and two complete expression blocks. A trailing partial block
    (possible with transposed kernels wider than their stride) is tolerated,
    since serving discards it. When the graph is derivable, the declared
    values must be the derived ones scaled to the declared block size.
    """
    report = FieldReport(True)
    fail = report.lines.append

    def reject(msg):
        report.passed = False
        fail(msg)

    unknown = [n for n in declared.receptive_fields if n not in graph.inputs]
    missing = [n for n in graph.inputs if n not in declared.receptive_fields]
    if unknown or missing:
        reject(f"input binding mismatch: unknown {unknown}, undeclared {missing}")
        return report

    derived = None
    try:
        derived = derive_fields(graph, declared.reference_input, output)
        report.derived = derived
        fail(f"derived: {derived.describe()}")
    except FieldDerivationError as exc:
        if "padding" in str(exc):
            reject(f"derivation: {exc}")
        else:
            fail(f"derivation not possible: {exc}")

    steps = input_steps(graph, declared, output) if derived is not None else {}
    e = declared.expression_field
    for blocks in (1, 2):
        shapes = {}
        for name, rf in declared.receptive_fields.items():
            step = steps.get(name, declared.step)
            if any(Fraction(s).denominator != 1 for s in step):
                reject(f"input {name!r}: block step {step} is not integral")
                return report
            size = tuple(int(r + (blocks - 1) * s) for r, s in zip(rf, step))
            shapes[name] = (1,) + size + (graph.input_channels(name),)
        try:
            inputs = {n: np.zeros(s, np.float32) for n, s in shapes.items()}
            out = forward(graph, inputs, outputs=[output or next(iter(graph.outputs))])
            got = next(iter(out.values())).shape[1:3]
        except GraphError as exc:
            reject(f"{blocks}-block run failed: {exc}")
            continue
        for axis, name in enumerate(("rows", "cols")):
            lo, hi = blocks * e[axis], (blocks + 1) * e[axis]
            ok = lo <= got[axis] < hi
            msg = (f"{blocks}-block run ({name}): input "
                   f"{_fmt(shapes[declared.reference_input][1:3])} -> output {got[axis]}, "
                   f"expected {lo}" + ("" if hi - lo == 1 else f" (+partial < {e[axis]})"))
            if ok:
                fail(msg + " ok")
            else:
                reject(msg)

    if derived is not None:
        dsteps = input_steps(graph, derived, output)
        for axis, name in enumerate(("rows", "cols")):
            if declared.scale_factor[axis] != derived.scale_factor[axis]:
                reject(f"scale factor ({name}) declared {declared.scale_factor[axis]}, "
                       f"derived {derived.scale_factor[axis]}")
                continue
            m, rem = divmod(declared.expression_field[axis], derived.expression_field[axis])
            if rem:
                reject(f"expression field ({name}) declared {declared.expression_field[axis]} is not a "
                       f"multiple of the derived {derived.expression_field[axis]}")
                continue
            for inp, rf in declared.receptive_fields.items():
                if inp not in derived.receptive_fields:
                    continue
                want = derived.receptive_fields[inp][axis] + (m - 1) * int(dsteps[inp][axis])
                if rf[axis] != want:
                    reject(f"receptive field of {inp!r} ({name}) declared {rf[axis]}, derived {want}")
    return report


def peak_intermediate_bytes(graph: ModelGraph, input_shape, include_inputs=True, outputs=None) -> int:
    """Peak sum of live tensor bytes over the topological schedule.

    A tensor is live from its production until its last consumer has run;
    requested outputs (all by default) stay live to the end.
    ``include_inputs=False`` counts only tensors the graph allocates itself.
    """
    shapes = infer_shapes(graph, input_shape)
    nbytes = {nid: 4 * int(np.prod(s)) for nid, s in shapes.items()}
    names = list(graph.outputs) if outputs is None else list(outputs)
    targets = {graph.output_node(n) for n in names}
    needed = set().union(*(graph.ancestors(t) for t in targets))
    remaining = {nid: 0 for nid in needed}
    for nid in needed:
        for src in graph.nodes[nid].inputs:
            remaining[src] += 1
    live = sum(nbytes[nid] for nid in graph.inputs.values() if nid in needed) if include_inputs else 0
    peak = live
    for nid in graph.order:
        node = graph.nodes[nid]
        if node.op == "Input" or nid not in needed:
            continue
        live += nbytes[nid]
        peak = max(peak, live)
        for src in node.inputs:
            remaining[src] -= 1
            if remaining[src] == 0 and src not in targets:
                if graph.nodes[src].op != "Input" or include_inputs:
                    live -= nbytes[src]
    return peak
