"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line front end:
2 for bad input, 3 for numerical failures.
"""

from __future__ import annotations


class NwregError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(NwregError, ValueError):
    exit_code = 2


class NumericError(NwregError, ArithmeticError):
    exit_code = 3


class NonFinite(InputError):
    """Input contains NaN or Inf."""


class DegenerateColumn(NumericError, ValueError):
    """A centered predictor column is identically zero (rank-deficient design)."""


class ModeMismatch(InputError):
    """Simulation scale mode incompatible with the degrees of freedom."""


class ParseError(InputError):
    """Malformed input file. ``line`` is 1-based, or None if not line specific."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateRow(ParseError):
    pass


class MissingIndex(InputError):
    """The index ticker is absent on some date."""


class SingularGram(NumericError):
    """A Gram / bread matrix is numerically singular."""

    def __init__(self, message: str, cond: float = float("inf")):
        self.cond = cond
        super().__init__(f"{message} (condition estimate {cond:.3g})")


class ZeroDenominator(NumericError):
    pass


class ZeroSE(NumericError):
    pass


class SolverFail(NumericError):
    """Quantile solver did not reach a certified minimizer."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class EmptyBand(NumericError):
    """Too few residuals inside the density-estimation band."""
