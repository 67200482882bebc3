"""Exception hierarchy shared by every archbench module."""

from __future__ import annotations

from typing import Optional


class ArchbenchError(ValueError):
    """Base class for all input, config and shape errors.

    ``layer`` optionally carries the index of the offending layer and ``line``
    its 1-based source line, so the CLI can point at the file position.
    """

    def __init__(self, message: str, *, layer: Optional[int] = None, line: Optional[int] = None):
        super().__init__(message)
        self.layer = layer
        self.line = line


# config
class ConfigError(ArchbenchError):
    pass


class MalformedDocument(ConfigError):
    pass


class MissingField(ConfigError):
    pass


class UnknownModule(ConfigError):
    pass


class BadFromIndex(ConfigError):
    pass


class UnknownScale(ConfigError):
    pass


# catalog / graph
class ShapeError(ArchbenchError):
    pass


class DegenerateShape(ShapeError):
    pass


class ArityMismatch(ShapeError):
    pass


class ChannelMismatch(ShapeError):
    pass


class ShapeConflict(ChannelMismatch):
    pass


class IndivisibleChannels(ShapeError):
    pass


class UnknownBackbone(ShapeError):
    pass


class UnknownTap(ShapeError):
    pass


class MissingDetect(ShapeError):
    pass


class MultipleDetect(ShapeError):
    pass


# annotations
class AnnotationError(ArchbenchError):
    pass


class MalformedXml(AnnotationError):
    pass


class MissingGeometry(AnnotationError):
    pass


class BadOccupiedFlag(AnnotationError):
    pass


class OutOfBounds(AnnotationError):
    pass


class DenormalizedInput(AnnotationError):
    pass


class BadFieldCount(AnnotationError):
    pass


class NonNumericField(AnnotationError):
    pass


class RangeViolation(AnnotationError):
    pass


class BadRatios(AnnotationError):
    pass


class DuplicateIds(AnnotationError):
    pass


# metrics
class MetricsError(ArchbenchError):
    pass


class EmptyClass(MetricsError):
    pass


class NoGroundTruth(MetricsError):
    pass
