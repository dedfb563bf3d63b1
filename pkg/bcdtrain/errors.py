"""
errors.py — exception hierarchy shared by the library and the CLI
"""
from __future__ import annotations


class BcdError(Exception):
    """Base class for every error raised by bcdtrain."""


class ShapeError(BcdError, ValueError):
    """Input-contract violation on matrix shapes."""


class DefinitenessError(BcdError, ArithmeticError):
    def __init__(self, pivot: int, value: float | None = None):
        self.pivot = pivot
        self.value = value
        detail = f" (value {value:.3e})" if value is not None else ""
        super().__init__(f"matrix is not positive definite: non-positive pivot at index {pivot}{detail}")


class NonFiniteError(BcdError, ArithmeticError):
    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite entries produced by {where}")


class UnsupportedError(BcdError, ValueError):
    """Loss / strategy / regularizer combination the solver cannot handle."""


class ConfigError(BcdError, ValueError):
    def __init__(self, key: str, line: int | None, message: str):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")


class IdxFormatError(BcdError):
    def __init__(self, path: str, offset: int, message: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path} @ offset {offset}: {message}")


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class DescentViolation(BcdError):
    """A convergence certificate failed during training."""

    def __init__(self, epoch: int, block: str, report: str):
        self.epoch = epoch
        self.block = block
        self.report = report
        super().__init__(f"epoch {epoch}, block {block}: {report}")
