from . import tape as ops
from .adam import Adam, adam_step
from .gradcheck import finite_difference_check, gradient_errors
from .params import ParameterStore, load_checkpoint, save_checkpoint
from .tape import Node, Tape

__all__ = [
    "Adam",
    "Node",
    "ParameterStore",
    "Tape",
    "adam_step",
    "finite_difference_check",
    "gradient_errors",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
]
