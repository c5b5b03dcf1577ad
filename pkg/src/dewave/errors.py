"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
StateError -> 4. Everything else is a programming error and propagates.
"""


class DewaveError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DewaveError):
    """Invalid configuration value or malformed/unknown config key."""


class DataError(DewaveError):
    """Bad data file, failed validation, or out-of-range input."""


class MissingWordError(DataError):
    """Words in a sample that have no fixation span at all."""

    def __init__(self, word_indices):
        self.word_indices = sorted(word_indices)
        super().__init__(
            "no fixation span for word indices " + ", ".join(map(str, self.word_indices))
        )


class StateError(DewaveError):
    """Operation attempted in an invalid state (missing checkpoint, mode mismatch, ...)."""


class ShapeError(DewaveError):
    """Tensor shape mismatch in a differentiable op."""


class NumericError(DewaveError):
    """Non-finite value encountered where finite values are required."""
