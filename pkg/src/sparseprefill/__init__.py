"""Block-wise transformer prefill with budgeted predictive FFN sparsity."""

__version__ = "0.1.0"

from .errors import NumericError, ValidationError

__all__ = ["NumericError", "ValidationError", "__version__"]
