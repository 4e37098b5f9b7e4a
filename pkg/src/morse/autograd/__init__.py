from . import ops
from .gradcheck import GradCheckReport, grad_check
from .nn import MLP, Conv2d, Module, Pointwise, init_rng
from .optim import adamw_step
from .tensor import NonFiniteError, Parameter, Tape, Tensor, active_tape, backward

__all__ = [
    "ops",
    "GradCheckReport",
    "grad_check",
    "MLP",
    "Conv2d",
    "Module",
    "Pointwise",
    "init_rng",
    "adamw_step",
    "NonFiniteError",
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
]
