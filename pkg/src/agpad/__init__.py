"""Attention-guided iris presentation attack detection on a small numpy autodiff core."""

from .tensor import DimensionError, NumericError, Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = ["DimensionError", "NumericError", "Tensor", "no_grad", "precision", "__version__"]
