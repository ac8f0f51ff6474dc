class TrackingError(Exception):
    """Root of every error raised by the tracking apps."""


class ConfigError(TrackingError, ValueError):
    """A scenario file, override or argument failed validation."""
