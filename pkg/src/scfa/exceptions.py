"""Exception hierarchy for the scfa package."""


class SCFAError(ValueError):
    """Base class for all errors raised by scfa."""


class NotCorrelationError(SCFAError):
    """The matrix is not a valid (positive semidefinite) correlation matrix."""


class DegenerateCombinationError(SCFAError):
    """A weighted combination of variables has (numerically) zero norm."""


class InconsistentCancellationError(SCFAError):
    """The sign of an observed correlation contradicts the cancelling weight."""


class EmptyModelError(SCFAError):
    """No variable carries common-factor information."""


class InvalidStructureError(SCFAError):
    """A factor structure cannot define a population correlation matrix."""
