"""Streaming application of convolutional models to large georeferenced rasters."""

__version__ = "0.1.0"
