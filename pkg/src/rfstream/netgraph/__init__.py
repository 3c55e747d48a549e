"""Minimal tensor-op graph standing in for a serialized model."""

from .fields import (
    FieldReport,
    derive_fields,
    input_steps,
    peak_intermediate_bytes,
    validate_fields,
)
from .forward import forward, infer_shapes
from .graph import ModelGraph, Node, load_graph, save_graph
from .zoo import (
    MOCK_MODELS,
    GraphBuilder,
    conv_pool_conv_graph,
    identity_graph,
    m3_like_graph,
    fcn80_graph,
)

__all__ = [
    "FieldReport", "GraphBuilder", "MOCK_MODELS", "ModelGraph", "Node",
    "conv_pool_conv_graph", "derive_fields", "forward", "identity_graph",
    "infer_shapes", "input_steps", "load_graph", "m3_like_graph",
    "fcn80_graph", "peak_intermediate_bytes", "save_graph", "validate_fields",
]
