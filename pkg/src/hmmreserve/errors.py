"""Exception hierarchy shared across the package."""


class HmmReserveError(Exception):
    """Base class for all package errors."""


class ValidationError(HmmReserveError):
    """Bad user input: malformed files, inconsistent configuration."""


class ConfigurationError(ValidationError):
    """A run configuration that cannot produce a valid fit."""


class NumericalError(HmmReserveError):
    """A numerical failure at runtime (overflow, non-finite likelihood)."""
