"""Exception hierarchy shared by all rfstream modules."""


class RFStreamError(Exception):
    """Base class for every error raised by rfstream."""


class SpecError(RFStreamError, ValueError):
    """A field specification is malformed or violates the step invariant."""


class AlignmentError(RFStreamError, ValueError):
    """Two pixel grids cannot be mapped onto each other."""


class RegionError(RFStreamError, ValueError):
    """A region lies outside the bounds it is checked against."""


class RasterIOError(RFStreamError, OSError):
    """Reading or writing a raster failed."""


class GraphError(RFStreamError, ValueError):
    """A model graph is malformed (cycles, unknown ops, bad weights)."""


class ShapeError(GraphError):
    """An op received inputs it cannot process. ``node`` names the op."""

    def __init__(self, node, message):
        super().__init__(f"node {node!r}: {message}")
        self.node = node


class FieldDerivationError(GraphError):
    """Fields cannot be derived from a graph (padding, inconsistent branches)."""


class PipelineError(RFStreamError, RuntimeError):
    """Pipeline graph or execution contract violated."""


class SamplingError(RFStreamError, ValueError):
    """Sample positions are invalid or not admissible."""
