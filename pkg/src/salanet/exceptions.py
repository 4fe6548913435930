"""Exception hierarchy shared by every stage of the pipeline."""


class SalaError(Exception):
    """Base class for all errors raised by salanet."""


class NotFound(SalaError, FileNotFoundError):
    pass


class FormatError(SalaError, ValueError):
    pass


class ValidationError(SalaError, ValueError):
    pass


class DegenerateInput(SalaError, ValueError):
    """Raised when an input carries no usable variation (e.g. constant volume)."""


class NumericalError(SalaError, ArithmeticError):
    pass
