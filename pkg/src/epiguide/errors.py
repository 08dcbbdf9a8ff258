"""Exception hierarchy shared by all epiguide modules."""


class EpiguideError(Exception):
    """Base class for every error raised by this package."""


# -- geometry ---------------------------------------------------------------

class DegenerateBaseline(EpiguideError):
    """Relative translation between two views is (numerically) zero."""


class ZeroLine(EpiguideError):
    """An epipolar line degenerated to the zero vector (point at epipole)."""


class EpipolePixel(EpiguideError):
    """A pixel backprojects parallel to the baseline; its plane is undefined."""


# -- guides -----------------------------------------------------------------

class IndexOutOfRange(EpiguideError, IndexError):
    """Cell index outside the grid."""


# -- model ------------------------------------------------------------------

class ShapeMismatch(EpiguideError, ValueError):
    """Array arguments disagree with the configured shapes."""


class MissingGeometry(EpiguideError):
    """Plane-angle encoding requested but no geometry was supplied."""


class NonFiniteActivation(EpiguideError):
    """A forward pass produced NaN or infinity."""


class CacheMismatch(EpiguideError):
    """Backward called with a cache from a different configuration."""


# -- robust estimation ------------------------------------------------------

class InsufficientPoints(EpiguideError):
    """Fewer correspondences than the estimator needs."""


class DegenerateConfiguration(EpiguideError):
    """Correspondence layout leaves the estimate underdetermined."""


class ZeroDenominator(EpiguideError):
    """Sampson denominator vanished (both points at the epipoles)."""


class NoModelFound(EpiguideError):
    """Every RANSAC sample was degenerate; no model could be fit."""


class InvalidCounts(EpiguideError, ValueError):
    """Match/inlier counts violate 0 <= inliers <= matches."""


# -- evaluation -------------------------------------------------------------

class UnknownQuery(EpiguideError, KeyError):
    """Query id absent from the index."""


class EmptyQuerySet(EpiguideError):
    """A metric was asked for over zero queries."""


class NoPositives(EpiguideError):
    """A query has no relevant database entries; AP is undefined."""


class MissingFeatures(EpiguideError):
    """An image in the ranking has no stored features to rescore with."""


# -- dataio -----------------------------------------------------------------

class BadMagic(EpiguideError):
    """Tensor file does not start with the expected magic bytes."""


class TruncatedPayload(EpiguideError):
    """Tensor payload shorter (or longer) than the header promises."""


class UnsupportedDtype(EpiguideError):
    """Tensor header names a dtype code this version does not define."""


class SchemaViolation(EpiguideError):
    """Manifest line fails schema validation."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DuplicateId(SchemaViolation):
    """Manifest repeats an image_id."""


class DanglingPath(SchemaViolation):
    """Manifest references a file that does not exist."""
