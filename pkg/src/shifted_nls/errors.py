"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid hyperparameter or argument combination."""


class DomainError(ValueError):
    """Inputs of incompatible shape or outside the valid domain."""


class CoordinateError(DomainError):
    """Sampling coordinate outside the addressable domain."""


class FormatError(OSError):
    """Malformed or inconsistent file contents."""
