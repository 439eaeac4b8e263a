"""Shared exception types.

Every error that maps to a CLI exit code lives here so the command layer
can translate uniformly.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """A dataset file could not be loaded or violates input invariants."""


class ShapeError(ValueError):
    """Tensor shape does not match the contract of an operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class UsageError(RuntimeError):
    """API misuse, e.g. scoring with an untrained model or missing state."""


class TrainingDiverged(RuntimeError):
    """Training aborted on a non-finite loss (CLI exit code 3)."""


class CheckpointFormatError(RuntimeError):
    """Checkpoint metadata missing, corrupt or of an unsupported version
    (CLI exit code 4)."""


class EvalMismatchError(RuntimeError):
    """Score files passed to one evaluation cover different test sets
    (CLI exit code 5)."""
