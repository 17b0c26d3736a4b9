"""Exception types shared across the package."""


class PointFusionError(Exception):
    """Base class for all package errors."""


class DegenerateBox(PointFusionError):
    """A 3D box with a near-zero dimension where a proper volume is required."""


class MalformedFile(PointFusionError):
    """A binary file whose length or structure violates the on-disk format."""


class ParseError(PointFusionError):
    """A text file row that cannot be mapped to the expected fields."""

    def __init__(self, message, path=None, line=None):
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class EmptyFrustum(PointFusionError):
    """No scene points project into the 2D detection box."""


class BehindCamera(PointFusionError):
    """A 3D box lies entirely behind the image plane."""


class ValidationError(PointFusionError):
    """A value outside its documented range (e.g. a score outside [0, 1])."""


class MissingFeature(PointFusionError):
    """A precomputed image feature lookup for an unknown sample id."""


class ShapeError(PointFusionError):
    """A tensor or image with the wrong shape for the requested operation."""


class EmptyInput(PointFusionError):
    """An operation that requires at least one point received none."""


class DivergenceError(PointFusionError):
    """Training loss became NaN or infinite."""
