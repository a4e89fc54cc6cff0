"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DependencyError -> 3,
NumericalError (and subclasses) -> 4.
"""


class CesError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CesError):
    """Invalid, inconsistent, or unknown configuration input."""


class DomainError(CesError):
    """A value lies outside the domain a contract requires."""


class DependencyError(CesError):
    """A pipeline stage's upstream artifacts are missing or stale."""


class NumericalError(CesError):
    """A numerical operation failed beyond recovery."""


class EvaluationError(NumericalError):
    """A forward-model evaluation failed (e.g. integration blow-up).

    Carries the offending physical parameter vector so calling code can
    resample or report it.
    """

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = None if theta is None else tuple(float(t) for t in theta)
