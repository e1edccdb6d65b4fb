"""Exporter error taxonomy.

Kept separate from the engine's hierarchy: the exporter fails on model and
checkpoint problems the engine never sees, and engine errors bubbling up
(bundle validation, config) keep their own types.
"""


class ExporterError(RuntimeError):
    """Base class for everything raised by this package."""


class CheckpointError(ExporterError):
    """A model checkpoint is missing, unloadable, or structurally unusable."""
