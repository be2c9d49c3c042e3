"""Exception hierarchy. Each family maps to a CLI exit code."""


class CILFError(Exception):
    exit_code = 1


class UsageError(CILFError, ValueError):
    """Invalid arguments or call sequence."""

    exit_code = 2


class ShapeError(UsageError):
    """Array shapes do not line up."""


class ConfigError(UsageError):
    exit_code = 2


class DataError(CILFError, ValueError):
    """Problems with input files or datasets."""

    exit_code = 3


class IDXFormatError(DataError):
    pass


class IDXMagicError(IDXFormatError):
    pass


class IDXTruncatedError(IDXFormatError):
    pass


class IDXCountMismatchError(IDXFormatError):
    pass


class CSVParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyDatasetError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class InsufficientDataError(UsageError):
    """Not enough classes or instances to build the requested stream."""


class NumericError(CILFError, ArithmeticError):
    exit_code = 4


class UndefinedMetricError(CILFError, ValueError):
    exit_code = 4


class UndefinedCVIError(UndefinedMetricError):
    pass


class PipelineError(CILFError):
    """Wraps a failure inside the stream loop with its window and stage."""

    def __init__(self, window, stage, cause):
        super().__init__(f"window {window}, stage {stage!r}: {cause}")
        self.window = window
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
