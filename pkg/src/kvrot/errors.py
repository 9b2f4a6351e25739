"""Exception types shared across the package.

Every error raised by the public API derives from KvrotError so callers (and
the CLI exit-code map) can distinguish failure classes without string matching.
"""


class KvrotError(Exception):
    """Base class for all package errors."""


class InvalidOrderError(KvrotError):
    """A Hadamard/rotation order is not a power of two or does not divide the dim."""


class ShapeError(KvrotError):
    """Operand dimensions do not match the declared layout."""


class NonFiniteInputError(KvrotError):
    """An input vector contains NaN or Inf."""


class NibbleRangeError(KvrotError):
    """A nibble value is outside [0, 15]."""


class TooFewSamplesError(KvrotError):
    """Codebook fitting was given fewer samples than centroids."""


class EmptyCalibrationError(KvrotError):
    """A learned rotation was requested from an empty accumulator."""


class CapacityExceededError(KvrotError):
    """The page pool has no free slot for a new token (eviction is unsupported)."""


class SequenceNotFoundError(KvrotError):
    """The sequence id is not registered in the page table."""


class EmptySequenceError(KvrotError):
    """Decode was requested over a sequence with no cached tokens."""


class RequestTooLargeError(KvrotError):
    """A single request's KV footprint exceeds the pool's total capacity."""


class ConfigError(KvrotError):
    """A run configuration is malformed (unknown key, bad type, bad value)."""
