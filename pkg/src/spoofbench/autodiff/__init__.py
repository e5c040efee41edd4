from . import ops
from .ops import OP_NAMES
from .optim import Adam
from .serialize import MAGIC, load_tensors, save_tensors
from .tensor import Tensor

__all__ = ["Tensor", "ops", "OP_NAMES", "Adam",
           "save_tensors", "load_tensors", "MAGIC"]
