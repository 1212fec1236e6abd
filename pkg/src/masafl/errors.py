"""Exception types shared across the package."""


class MasaflError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MasaflError):
    """A shape, dimension, or hyperparameter constraint was violated."""


class IngestError(MasaflError):
    """A data file could not be parsed; the message carries the byte offset."""


class NumericError(MasaflError):
    """A non-finite value appeared where finiteness is required."""


class EmptyShardError(MasaflError):
    """A client has no local data; the caller should skip this client."""


class ComparisonError(MasaflError):
    """Runs cannot be compared: missing artifacts or mismatched scenarios."""
