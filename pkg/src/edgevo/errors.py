"""Exception types shared across the package."""


class EdgeVOError(Exception):
    """Base class for all edgevo errors."""


class AmbiguousLog(EdgeVOError):
    """Rotation angle at or beyond pi: the logarithm is not unique."""


class BehindCamera(EdgeVOError):
    """Point has non-positive depth in the camera frame."""


class InvalidDepth(EdgeVOError):
    """Inverse depth must be strictly positive."""


class DegenerateLine(EdgeVOError):
    """Line construction from (near-)coincident endpoints."""


class NoObservations(EdgeVOError):
    """Residual system has no valid rows."""


class DegenerateSystem(EdgeVOError):
    """Normal equations are rank deficient or too ill-conditioned."""


class InvalidElement(EdgeVOError):
    """Edge id not present in the ground set."""


class TooLarge(EdgeVOError):
    """Instance too large for exhaustive enumeration."""


class DegenerateIntersection(EdgeVOError):
    """Lines are (nearly) parallel; their intersection is unreliable."""


class NoParallax(EdgeVOError):
    """Zero (or negligible) baseline: depth is unobservable."""


class SearchOutOfBounds(EdgeVOError):
    """Epipolar search interval falls entirely outside the image."""


class DegenerateTriangulation(EdgeVOError):
    """Back-projected planes are parallel; no unique 3D line."""


class InvalidVariance(EdgeVOError):
    """Variance must be strictly positive."""


class TooFewPoints(EdgeVOError):
    """Not enough valid depth samples for a line fit."""


class NoConsensus(EdgeVOError):
    """RANSAC consensus below the required fraction."""


class EmptyView(EdgeVOError):
    """Rendered view contains no scene geometry."""


class InsufficientOverlap(EdgeVOError):
    """Too few associated pose pairs for the requested evaluation."""


class TrajectoryParseError(EdgeVOError):
    """Malformed trajectory file."""
