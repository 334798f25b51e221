"""Dual-branch scene classifier: convolutional local features fused with
selective state-space global context, classified by a mixture-of-experts
head. Built on a self-contained numpy autodiff engine with an optional
compiled scan kernel."""

__version__ = "0.1.0"

from .tensor import Tensor

__all__ = ["Tensor", "__version__"]
