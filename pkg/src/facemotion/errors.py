"""Exception types shared across the library.

The CLI maps these onto process exit codes: configuration problems exit
with 2, malformed data or violated data contracts with 3, and numerical
failures (NaN/Inf where finite values are required) with 4.
"""


class FaceMotionError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(FaceMotionError):
    """Invalid configuration: bad field values, impossible splits, missing inputs."""

    exit_code = 2


class DataFormatError(FaceMotionError):
    """A file could not be parsed: bad magic, version, or truncation."""

    exit_code = 3


class DimensionError(FaceMotionError):
    """Array shapes violate an operation's contract."""

    exit_code = 3


class ContractError(FaceMotionError):
    """An argument violates a documented precondition."""

    exit_code = 3


class SequenceTooShortError(FaceMotionError):
    """A sequence has too few frames for the requested operation."""

    exit_code = 3


class NumericalError(FaceMotionError):
    """A NaN or Inf appeared where finite values are required."""

    exit_code = 4
