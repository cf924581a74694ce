"""Mean-field variational inference, CAVI, and ELBO-based model selection."""
from .core import NumericError, UsageError

__version__ = "0.1.0"
__all__ = ["NumericError", "UsageError", "__version__"]
