"""Exception types raised across the package.

Every operational failure maps to one of these, so callers (and the CLI)
can tell configuration mistakes from data problems without string matching.
"""


class RefposeError(Exception):
    """Base class for all package errors."""


# geometry
class NonPositiveDepth(RefposeError):
    """A point that must be in front of the camera has z <= 0."""


class InvalidScale(RefposeError):
    """A scale, box size, or focal quantity that must be positive is not."""


class ZeroVector(RefposeError):
    """A direction vector with (near-)zero norm cannot be normalized."""


# point clouds
class DegenerateCloud(RefposeError):
    """Point cloud has no spatial extent (all points coincide)."""


class DegenerateRays(RefposeError):
    """Triangulation rays are (near-)parallel or share a camera center."""


class Collinear(RefposeError):
    """Point correspondences do not span a plane; alignment is ambiguous."""


# images and correlation
class ImageTooSmall(RefposeError):
    """An image or pyramid level is below the minimum usable size."""


# detection / selection / refinement
class NoDetection(RefposeError):
    """No correlation peak above the detection threshold."""


class TooFewReferences(RefposeError):
    """Fewer reference views available than the operation requires."""


class EmptyVolume(RefposeError):
    """Too few feature-volume vertices project inside all images."""


# objectives / evaluation
class LengthMismatch(RefposeError):
    """Paired sequences have different lengths."""


class NonPositive(RefposeError):
    """A quantity that must be strictly positive is not."""


class EmptyModel(RefposeError):
    """Metric evaluation received an empty model point set."""


class EmptyList(RefposeError):
    """An aggregate over an empty error list is undefined."""


# data I/O
class DataError(RefposeError):
    """Base class for reference/query set loading problems."""


class ParseError(DataError):
    """Malformed file (JSON, PNG, or invalid pose/field values)."""


class MissingPose(DataError):
    """An image file has no accompanying camera file."""


class InconsistentIntrinsics(DataError):
    """Camera intrinsics are missing, non-finite, or non-positive."""


class IdMismatch(DataError):
    """Prediction and ground-truth records do not cover the same ids."""
