from . import core, nn
from .core import Tensor, no_grad
from .gradcheck import NonFiniteEvaluation, grad_check, grad_check_model
from .optim import AdamW, DivergenceError, LrSchedule, OptimizerState, adamw_step, cosine_lr

__all__ = [
    "core",
    "nn",
    "Tensor",
    "no_grad",
    "grad_check",
    "grad_check_model",
    "NonFiniteEvaluation",
    "AdamW",
    "DivergenceError",
    "LrSchedule",
    "OptimizerState",
    "adamw_step",
    "cosine_lr",
]
