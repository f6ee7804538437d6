"""Exception types raised across the toolkit."""


class LocpipeError(Exception):
    """Base class for all toolkit errors."""


# geometry / scene model
class CheiralityViolation(LocpipeError):
    """Point is behind the camera (z <= 0 in the camera frame)."""


class UnknownImage(LocpipeError):
    pass


class ParseError(LocpipeError):
    """Malformed input file; message carries the offending line number."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix += str(path)
        if line is not None:
            prefix += f":{line}"
        super().__init__(f"{prefix}: {message}" if prefix else message)


class UnsupportedCameraModel(LocpipeError):
    pass


# preprocessing
class ImageTooSmall(LocpipeError):
    pass


class DimensionMismatch(LocpipeError):
    pass


class NoConvergence(LocpipeError):
    """Iterative undistortion failed for some points.

    `indices` lists the offending point indices.
    """

    def __init__(self, message, indices=()):
        self.indices = list(indices)
        super().__init__(message)


# feature / descriptor files
class BadMagic(ParseError):
    pass


class TruncatedFile(ParseError):
    pass


class NonFiniteDescriptor(LocpipeError):
    pass


# retrieval
class EmptyIndex(LocpipeError):
    pass


class ZeroVector(LocpipeError):
    pass


class MissingFeatures(LocpipeError):
    def __init__(self, image_id):
        self.image_id = image_id
        super().__init__(f"no local features available for image {image_id!r}")


# mapping
class MissingTimestamps(LocpipeError):
    pass


class DegenerateGeometry(LocpipeError):
    pass


class NoValidObservation(LocpipeError):
    pass


# localization
class TooFewCorrespondences(LocpipeError):
    pass


class NoPoseError(LocpipeError):
    """Every cluster failed to produce a pose."""


class ShapeMismatch(LocpipeError):
    pass


# pose refinement
class AllInvalid(LocpipeError):
    pass


class DegenerateCloud(LocpipeError):
    pass


class Diverged(LocpipeError):
    pass


# harness
class NameMismatch(LocpipeError):
    pass


class InfeasibleSpec(LocpipeError):
    pass


class ConfigError(LocpipeError):
    pass
