"""Exception types raised by the measurement and adaptation pipeline.

Every error is a subclass of :class:`AopKitError`.  Errors raised from
inside ``compute_aop`` additionally carry the name of the pipeline stage
that failed in their ``stage`` attribute.
"""

from __future__ import annotations


class AopKitError(Exception):
    """Base class for all package errors."""

    #: pipeline stage name, set when raised from compute_aop
    stage: str | None = None


class InvalidInput(AopKitError):
    """An argument violates a documented precondition."""


class FormatError(AopKitError):
    """A byte stream does not conform to the expected file format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingStructure(AopKitError):
    """A required class is absent from the label mask."""

    def __init__(self, class_id: int, message: str | None = None):
        super().__init__(message or f"no pixels of class {class_id}")
        self.class_id = class_id


class EmptyStructure(AopKitError):
    """A metric was asked to compare against an empty region."""


class InsufficientPoints(AopKitError):
    """Too few points for a stable fit."""


class DegenerateFit(AopKitError):
    """The conic fit did not produce a real ellipse."""


class DegenerateAxis(AopKitError):
    """The principal-axis computation has no usable spread."""


class PointNotExterior(AopKitError):
    """Tangent construction from a point inside or on the ellipse."""


class InvalidTriangle(AopKitError):
    """Side lengths cannot form a (possibly degenerate) triangle."""


class AnisotropicSpacing(AopKitError):
    """An operation requiring square pixels got anisotropic spacing."""


class InvalidSpec(AopKitError):
    """A phantom specification fails validation."""
