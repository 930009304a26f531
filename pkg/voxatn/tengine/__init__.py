"""Dense float64 tensor engine with reverse-mode autograd."""
from .gradcheck import GradCheckReport, gradient_check
from .optim import SGDM, SgdmState, sgdm_step
from .tensor import Tensor, parameter

__all__ = [
    "GradCheckReport",
    "SGDM",
    "SgdmState",
    "Tensor",
    "gradient_check",
    "parameter",
    "sgdm_step",
]
