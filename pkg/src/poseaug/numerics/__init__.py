"""Float64 tensors with reverse-mode gradients, layers, Adam and checkpoints."""

from . import functional
from .checkpoint import load_arrays, save_arrays
from .nn import BatchNorm1d, Dropout, Linear, Module, Parameter, frozen
from .optim import Adam, linear_decay
from .tensor import Tensor, as_array, concat, matmul, no_grad, stack, tensor, where

__all__ = [
    "Adam", "BatchNorm1d", "Dropout", "Linear", "Module", "Parameter", "Tensor",
    "as_array", "concat", "frozen", "functional", "linear_decay", "load_arrays",
    "matmul", "no_grad", "save_arrays", "stack", "tensor", "where",
]
