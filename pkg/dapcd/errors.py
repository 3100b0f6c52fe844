"""Exception hierarchy shared by every dapcd module.

Library code raises these; only the CLI turns them into exit codes.
"""
from __future__ import annotations

__all__ = [
    "PcdError",
    "ValidationError",
    "ConfigError",
    "DomainError",
    "MalformedFileError",
    "ParseError",
    "MalformedRowError",
    "MissingFieldError",
    "InsufficientDataError",
    "InfeasibleStrategyError",
    "PlacementError",
    "UndefinedMetricError",
]


class PcdError(Exception):
    exit_code = 1


class ValidationError(PcdError, ValueError):
    exit_code = 2


class ConfigError(PcdError, ValueError):
    exit_code = 2


class DomainError(PcdError, ValueError):
    exit_code = 2


class MalformedFileError(PcdError):
    exit_code = 3


class ParseError(PcdError):
    exit_code = 3


class MalformedRowError(PcdError):
    exit_code = 3

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class MissingFieldError(PcdError):
    exit_code = 3

    def __init__(self, field: str, source: str | None = None):
        where = f" in {source}" if source else ""
        super().__init__(f"missing field {field!r}{where}")
        self.field = field


class InsufficientDataError(PcdError):
    exit_code = 4


class InfeasibleStrategyError(PcdError):
    exit_code = 5


class PlacementError(PcdError):
    exit_code = 6


class UndefinedMetricError(PcdError):
    exit_code = 7
