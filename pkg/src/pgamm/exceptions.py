"""Exception types raised across the package.

Everything derives from :class:`PgammError` so callers can catch broadly;
the subclasses match the distinct failure contracts of the individual
modules (data ingestion, numeric domain, solver, tuning).
"""


class PgammError(Exception):
    """Base class for all pgamm errors."""


class RoleError(PgammError, KeyError):
    """A configured column role is missing from the input file."""


class ParseError(PgammError, ValueError):
    """A cell could not be parsed as a number; carries the row index."""


class ValidationError(PgammError, ValueError):
    """A dataset invariant is violated (empty subject, n < 2, ...)."""


class DegenerateCovariateError(PgammError, ValueError):
    """A covariate column has zero variance / zero range."""


class DomainError(PgammError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class SupportError(PgammError, ValueError):
    """A response value lies outside the support of the chosen family."""


class ParameterError(PgammError, ValueError):
    """A structural parameter (e.g. correlation rho) is out of range."""


class EstimationError(PgammError, ValueError):
    """A moment estimator has no information to work with."""


class ContractError(PgammError, ValueError):
    """An internal precondition was violated by the caller."""


class NumericalError(PgammError, ArithmeticError):
    """A non-finite intermediate was produced; carries location info."""


class SolverError(PgammError, RuntimeError):
    """The Newton system is irrecoverably singular."""


class TuningError(PgammError, RuntimeError):
    """Lambda selection failed (no usable grid point)."""


class DegreesOfFreedomError(PgammError, ValueError):
    """Dispersion estimation requested with non-positive dof."""


class ChainWarning(UserWarning):
    """Metropolis acceptance rate outside the healthy diagnostic band."""
