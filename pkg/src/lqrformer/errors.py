"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each family."""

from __future__ import annotations


class LqrfError(Exception):
    exit_code = 1


class UsageError(LqrfError):
    exit_code = 2


class FormatError(LqrfError):
    """Unreadable, corrupt or mismatched files and configs."""

    exit_code = 3


class ConfigMismatchError(FormatError):
    pass


class NumericError(LqrfError):
    exit_code = 4


class SolverError(NumericError):
    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class GenerationError(NumericError):
    pass


class DegenerateDataError(NumericError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class EncodingError(ValueError):
    pass
