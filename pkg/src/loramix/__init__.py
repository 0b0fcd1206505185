"""loramix: sparse mixtures of LoRA experts on a desk-scale tensor engine."""

from .tensor import Tensor, backward, softmax, tensor, zeros

__all__ = ["Tensor", "backward", "softmax", "tensor", "zeros"]
