"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when a configuration value is invalid or infeasible."""


class IdxFormatError(ValueError):
    """Raised when an IDX file fails to parse (bad magic, truncation, count mismatch)."""
