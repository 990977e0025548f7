"""Exception types shared across the package."""


class DynpanelError(Exception):
    """Base class for all errors raised by this package."""


class DataError(DynpanelError):
    """Malformed input data: bad CSV, duplicate keys, unparseable cells."""


class AlignmentError(DynpanelError):
    """No estimable observations after aligning variables and lags."""


class RatingError(DynpanelError):
    """Unknown grade label or numeric value outside the rating scale."""


class EstimationError(DynpanelError):
    """Estimation cannot proceed or did not converge."""


class RankError(EstimationError):
    """Regressor or cross-moment matrix is rank deficient."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class UnderIdentifiedError(EstimationError):
    """Fewer instrument columns than regressors."""


class SingularWeightingError(EstimationError):
    """GMM weighting matrix is singular.

    Usually means too many instrument columns for the number of
    cross-sections; collapse the dynamic blocks or bound the lag depth.
    """


class DiagnosticError(DynpanelError):
    """A specification test cannot be computed on the given result."""
