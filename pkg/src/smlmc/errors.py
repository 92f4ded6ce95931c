"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`SmlmcError` and carries a short ``category`` string, which the CLI
uses to pick its exit code.
"""


class SmlmcError(Exception):
    category = "error"
    exit_code = 1


class DomainError(SmlmcError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""

    category = "domain"
    exit_code = 2


class NumericError(SmlmcError, ArithmeticError):
    """A factorization or evaluation failed even after the jitter policy."""

    category = "numeric"
    exit_code = 4


class FitError(NumericError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (outer iteration {iteration})")
        self.iteration = iteration

    category = "fit"


class ParseError(SmlmcError, ValueError):
    """Malformed dataset file; ``line`` is the 1-based line number when known."""

    category = "parse"
    exit_code = 3

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ModelFormatError(SmlmcError, ValueError):
    category = "model-format"
    exit_code = 5


class PopulationError(SmlmcError):
    category = "population"
    exit_code = 6
