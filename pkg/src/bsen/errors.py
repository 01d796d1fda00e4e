"""Exception types shared across the pipeline."""


class DataError(ValueError):
    """Input data is malformed, inconsistent or violates a domain invariant."""


class ConfigError(ValueError):
    """A configuration value is invalid."""
