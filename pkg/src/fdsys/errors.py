"""Exception hierarchy shared by every module of the package."""


class FdsError(Exception):
    """Base class for all library errors."""


# scenario tree / processes
class InvalidGrid(FdsError, ValueError):
    pass


class BudgetExceeded(FdsError):
    pass


class DimensionMismatch(FdsError, ValueError):
    pass


# expression language
class ParseError(FdsError, ValueError):
    """Malformed expression source.

    Carries the 1-based ``line`` and ``column`` of the offending token and the
    set of tokens the parser would have accepted there.
    """

    def __init__(self, message, line, column, expected=()):
        self.line = line
        self.column = column
        self.expected = tuple(sorted(set(expected)))
        where = f"line {line}, column {column}"
        if self.expected:
            message = f"{message} (expected one of: {', '.join(self.expected)})"
        super().__init__(f"{where}: {message}")


class UnboundVariable(FdsError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DomainError(FdsError, ArithmeticError):
    pass


# operators
class UnsupportedDimension(FdsError, ValueError):
    pass


class MissingReference(FdsError, ValueError):
    pass


# problem definition and solvers
class ValidationError(FdsError, ValueError):
    pass


class ScopeViolation(ValidationError):
    pass


class NonFinite(FdsError, ArithmeticError):
    def __init__(self, message, level=None, node=None):
        self.level = level
        self.node = node
        super().__init__(message)


class SolverError(FdsError):
    """Picard iteration failed; ``report`` holds the diagnostics so far."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class NonContractive(SolverError):
    pass


class MaxIterExceeded(SolverError):
    pass


class SubintervalNonContractive(SolverError):
    def __init__(self, message, interval, report=None):
        self.interval = interval
        super().__init__(message, report)


class PartitionExhausted(SolverError):
    pass


class GridOutOfRange(FdsError):
    pass
