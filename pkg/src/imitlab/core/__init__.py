from . import tensor as T
from .optim import NonFiniteGradient, OptimizerState, optimizer_step
from .tensor import ShapeError, Tensor, backward, no_grad, parameter

__all__ = [
    "T",
    "Tensor",
    "ShapeError",
    "backward",
    "parameter",
    "no_grad",
    "OptimizerState",
    "optimizer_step",
    "NonFiniteGradient",
]
