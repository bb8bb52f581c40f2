from typing import Any, Optional

from fastapi import HTTPException, status


# ============== Engine errors ==============

class MDROError(Exception):
    """Base class for every engine failure."""

    exit_code: int = 1
    status_code: int = status.HTTP_500_INTERNAL_SERVER_ERROR

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InputError(MDROError):
    """Malformed or inconsistent user input."""

    exit_code = 2
    status_code = status.HTTP_422_UNPROCESSABLE_ENTITY

    def __init__(self, detail: str, line: Optional[int] = None, source: Optional[str] = None):
        if line is not None:
            where = f"{source}:{line}" if source else f"line {line}"
            detail = f"{where}: {detail}"
        super().__init__(detail)
        self.line = line
        self.source = source


class DivergenceDomainError(MDROError):
    """Argument outside the domain of φ, φ* or φ*′."""


class UnknownDivergenceError(InputError):
    """Divergence name not recognized."""

    status_code = status.HTTP_400_BAD_REQUEST


class UnsupportedDivergenceError(InputError):
    """Operation not defined for the chosen divergence."""

    status_code = status.HTTP_400_BAD_REQUEST


class ShapeError(InputError):
    """Dimension mismatch between blocks."""


class TreeSizeError(InputError):
    """Scenario tree exceeds the configured node cap."""


class TreeValidationError(InputError):
    """Scenario tree violates a structural invariant."""

    def __init__(self, detail: str, violations: Optional[list[Any]] = None):
        super().__init__(detail)
        self.violations = violations or []


class IngestionError(InputError):
    """Missing or unreadable model input file."""


class ModelError(InputError):
    """Water network is not a valid model."""


class LpSolverError(MDROError):
    """Numerical failure inside the LP backend."""

    def __init__(self, detail: str, trace: Optional[list[str]] = None):
        super().__init__(detail)
        self.trace = trace or []


class InfeasibleNodeError(MDROError):
    """A node LP is infeasible: the model lacks relatively complete recourse."""


class FeasibilityViolationError(MDROError):
    """An iterate violates the implicit conjugate-domain constraints."""


class CutPoolLimitError(MDROError):
    """A node accumulated more cuts than allowed."""


class LogicError(MDROError):
    """An operation was invoked outside its contract."""


class OracleBracketError(MDROError):
    """Dual search could not bracket the optimal multiplier."""


class OracleSizeError(MDROError):
    """Instance too large for a brute-force oracle."""


# ============== HTTP errors ==============

class BadRequestException(HTTPException):
    """400 Bad Request"""
    def __init__(self, detail: str = "Bad request"):
        super().__init__(status_code=status.HTTP_400_BAD_REQUEST, detail=detail)


class UnprocessableEntityException(HTTPException):
    """422 Unprocessable Entity"""
    def __init__(self, detail: str = "Unprocessable entity"):
        super().__init__(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=detail)


class InternalServerException(HTTPException):
    """500 Internal Server Error"""
    def __init__(self, detail: str = "Internal server error"):
        super().__init__(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=detail)


def to_http_exception(exc: MDROError) -> HTTPException:
    """Translate an engine error into the matching HTTP exception."""
    if exc.status_code == status.HTTP_400_BAD_REQUEST:
        return BadRequestException(exc.detail)
    if exc.status_code == status.HTTP_422_UNPROCESSABLE_ENTITY:
        return UnprocessableEntityException(exc.detail)
    return InternalServerException(exc.detail)
