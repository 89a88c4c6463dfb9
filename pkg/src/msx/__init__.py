"""Chest X-ray segmentation + classification pipeline on a from-scratch autodiff core."""

from .tensor import Tensor, ShapeError, no_grad

__all__ = ["Tensor", "ShapeError", "no_grad"]
__version__ = "0.1.0"
