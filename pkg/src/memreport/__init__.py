"""Memory-driven transformer for long patterned-report generation.

Pure numpy/CPU at desk scale: a small reverse-mode autodiff core drives an
encoder-decoder transformer whose decoder is conditioned, through layer
normalization, on a relational memory that is updated token by token.
"""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
