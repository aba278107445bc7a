"""delaycast: multi-airport delay forecasting on a self-contained autodiff core."""

from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
