"""Exception hierarchy.

Everything raised on bad input or failed numerics derives from
:class:`SKCDError`, which the CLI maps to exit status 1.
"""

from __future__ import annotations


class SKCDError(Exception):
    """Base class for all package errors."""


class SchemaError(SKCDError):
    """A referenced column is missing or the column layout is inconsistent."""


class ParseError(SKCDError):
    """A CSV cell could not be parsed as a number."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class DomainError(SKCDError, ValueError):
    """An argument lies outside its admissible domain."""


class NumericalError(SKCDError, ArithmeticError):
    """A factorization or iterative solver failed."""
