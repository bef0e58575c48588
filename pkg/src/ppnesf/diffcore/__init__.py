"""Differentiable building blocks on top of torch autograd."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import gradient_probe_errors
from .hashgrid import HashGridEncoding
from .mlp import Mlp
from .optim import LrSchedule, ScheduledAdam, exponential_lr, optimizer_step

__all__ = [
    "HashGridEncoding",
    "LrSchedule",
    "Mlp",
    "ScheduledAdam",
    "exponential_lr",
    "gradient_probe_errors",
    "load_checkpoint",
    "optimizer_step",
    "save_checkpoint",
]
