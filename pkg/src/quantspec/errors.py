"""Exception types shared across the engine."""


class QuantSpecError(Exception):
    """Base class for all engine errors."""


class DimensionError(QuantSpecError):
    """Tensor shapes do not line up."""


class ConfigError(QuantSpecError):
    """Invalid configuration value or inconsistent operation mode."""


class DataError(QuantSpecError):
    """Payload values are unusable (NaN/Inf, out-of-range token ids, ...)."""


class EmptyPromptError(DataError):
    """Prefill was handed zero tokens."""


class CacheIntegrityError(QuantSpecError):
    """Cache state violates its structural contract."""


class BufferOverflowError(CacheIntegrityError):
    """Append past the recent-token buffer capacity; an engine scheduling bug."""


class FormatError(QuantSpecError):
    """Malformed weight or snapshot file."""
