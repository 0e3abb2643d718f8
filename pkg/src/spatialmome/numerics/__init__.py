from . import autograd as ag
from .autograd import NumericError, Tape, Tensor, forward_backward, no_record, parameter
from .gradcheck import GradCheckReport, grad_check
from .optim import OptimizerConfig, OptimizerState, adamw_step, layerwise_scale, lr_at

__all__ = [
    "ag", "NumericError", "Tape", "Tensor", "forward_backward", "no_record", "parameter",
    "GradCheckReport", "grad_check",
    "OptimizerConfig", "OptimizerState", "adamw_step", "layerwise_scale", "lr_at",
]
