from __future__ import annotations

from typing import Any, Optional


class ReckitError(ValueError):
    """Base class for recoverable failures of a task."""

    exit_code = 3


class SpaceMismatch(ReckitError):
    pass


class PreconditionError(ReckitError):
    def __init__(self, message: str, witness: Any = None) -> None:
        self.witness = witness
        if witness is not None:
            message = f"{message} (witness: {witness!r})"
        super().__init__(message)


class EvalError(ReckitError):
    pass


class SpecError(ReckitError):
    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None, col: Optional[int] = None, key: str = "") -> None:
        self.message, self.line, self.col, self.key = message, line, col, key
        if line is not None:
            message = f"line {line}, col {col or 1}: {message}"
        super().__init__(message)


class InvariantViolation(RuntimeError):
    """An identity that must hold by construction failed, or an iteration cap was hit."""

    exit_code = 4


def exit_code_of(exc: BaseException) -> int:
    return int(getattr(exc, "exit_code", 4))
