"""Exception hierarchy.

Each family maps to one CLI exit code (see ``sglstm.cli``).
"""


class SgLstmError(Exception):
    exit_code = 2


class DimensionError(SgLstmError, ValueError):
    exit_code = 2


class DataError(SgLstmError, ValueError):
    exit_code = 2


class DegenerateInputError(DataError):
    """Raised when an input has nothing usable (e.g. no in-table tokens)."""


class DegenerateOutputError(DataError):
    pass


class ParameterError(SgLstmError, ValueError):
    exit_code = 1


class ConfigurationError(SgLstmError):
    exit_code = 3


class NonFiniteGradientError(DataError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in tensor {name!r}")
        self.name = name


class CheckpointError(SgLstmError):
    exit_code = 2


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StageDependencyError(ConfigurationError):
    """A pipeline stage ran before the stage that produces its input."""

    def __init__(self, missing, producer):
        super().__init__(f"{missing} not found; run `sglstm {producer}` first")
        self.missing = missing
        self.producer = producer


class ChainError(DataError):
    """A file no longer matches the hash recorded in a stage manifest."""
