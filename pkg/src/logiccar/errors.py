"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, ValidationError -> 3,
ExternalServiceError -> 4, NumericalError (and autodiff GraphError) -> 5.
"""


class ConfigError(Exception):
    """Malformed or contradictory configuration."""


class ValidationError(Exception):
    """Inputs violate a documented contract."""


class ExternalServiceError(Exception):
    """A remote dependency failed after retries."""


class NumericalError(Exception):
    """A numerical invariant broke at runtime (non-finite loss, etc.)."""
