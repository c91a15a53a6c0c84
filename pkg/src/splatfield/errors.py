"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes or feature dimensions do not agree."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A file does not conform to its declared on-disk format."""


class TrackingError(RuntimeError):
    """Tracking cannot proceed (e.g. empty map)."""


class NumericError(RuntimeError):
    """A non-finite value was produced where finiteness is required."""
