"""Pyramidal CNN/transformer saliency network with a small numpy autodiff core."""
from .tensor import Tensor, ShapeError, no_grad, wide_precision

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "no_grad", "wide_precision", "__version__"]
