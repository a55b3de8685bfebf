from .gradcheck import GradCheckReport, finite_diff_check
from .optim import AdamState, adam_step
from .tensor import Graph, Tensor, backward, default_dtype, no_grad, parameter, precision

__all__ = [
    "AdamState",
    "GradCheckReport",
    "Graph",
    "Tensor",
    "adam_step",
    "backward",
    "default_dtype",
    "finite_diff_check",
    "no_grad",
    "parameter",
    "precision",
]
