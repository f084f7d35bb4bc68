"""Small reverse-mode autodiff engine used by the surrogate network."""

from . import ops
from .gradcheck import finite_diff_check
from .ops import BatchNormStats, LAYER_KINDS, layer_forward
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step
from .tensor import Graph, GraphError, ShapeError, Tensor, backward

__all__ = [
    "Adam",
    "AdamState",
    "BatchNormStats",
    "Graph",
    "GraphError",
    "LAYER_KINDS",
    "NonFiniteGradientError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "finite_diff_check",
    "layer_forward",
    "ops",
]
