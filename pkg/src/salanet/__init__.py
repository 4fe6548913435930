"""Multi-view short-axis / long-axis cardiac MR right-ventricle segmentation."""

__version__ = "0.1.0"

from .exceptions import DegenerateInput, FormatError, NotFound, NumericalError, SalaError, ValidationError

__all__ = [
    "DegenerateInput", "FormatError", "NotFound", "NumericalError", "SalaError", "ValidationError",
    "__version__",
]
