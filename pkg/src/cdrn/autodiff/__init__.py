from . import ops
from .gradcheck import GradCheckReport, grad_check
from .optim import Adam, AdamState, MissingGradientError
from .tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    get_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_debug,
    set_precision,
)

__all__ = [
    "Adam",
    "AdamState",
    "GradCheckReport",
    "GraphError",
    "MissingGradientError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "get_dtype",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "precision",
    "set_debug",
    "set_precision",
]
