"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class CtadaptError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CtadaptError):
    """Invalid configuration, parameters, or usage."""

    exit_code = 2


class DataError(CtadaptError):
    """Invalid, inconsistent, or missing data."""

    exit_code = 3


class NumericError(CtadaptError):
    """Non-finite values encountered during numeric computation."""

    exit_code = 4


class DimensionError(DataError):
    """Array shape does not match what an operation requires."""


class TrainingError(DataError):
    """Training inputs cannot produce a valid model (e.g. one class only)."""


class MultiplierUndefinedError(DataError):
    """Recall ratio is undefined on the given validation set."""


class CheckpointError(DataError):
    """Checkpoint file cannot be used."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint was written with an unknown format version."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or malformed."""
