"""Exception types raised across the package."""


class LatticeTFError(Exception):
    """Base class for package errors."""


class DimensionError(LatticeTFError, ValueError):
    """A lattice axis is too short for the requested difference order."""


class RankDeficiencyError(LatticeTFError, ValueError):
    """Polynomial null basis has numerically dependent columns."""


class DomainError(LatticeTFError, ValueError):
    """A value lies outside the natural-parameter or mean domain."""


class SizeLimitError(LatticeTFError, ValueError):
    """A dense computation was requested above the desk-scale limit."""


class UnsupportedFamilyError(LatticeTFError, ValueError):
    """The operation is not defined for this exponential family."""


class CriterionMismatchError(LatticeTFError, ValueError):
    """Risk criterion is incompatible with the family or estimator."""
