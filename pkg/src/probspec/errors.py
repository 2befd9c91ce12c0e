"""Exception types shared across the package."""


class ProbSpecError(Exception):
    """Base class for all package errors."""


class DimensionError(ProbSpecError, ValueError):
    """Array shapes or grid sizes do not match."""


class ContractError(ProbSpecError, ValueError):
    """An input violates a documented precondition."""


class CoverageError(ProbSpecError, ValueError):
    """A frequency lies outside the log-spectrum grid."""


class NumericalError(ProbSpecError, ArithmeticError):
    """A numerical procedure failed (non-finite values, divergence, singularity)."""


class ConfigError(ProbSpecError, ValueError):
    """Invalid run configuration."""


class CoverageWarning(UserWarning):
    """The truncated aliasing sum may not have converged."""
