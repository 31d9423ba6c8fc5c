"""Small reverse-mode autodiff engine over numpy arrays."""
from . import ops
from .array import (DiffArray, backward, default_dtype, graph_inventory, no_grad, precision,
                    scope)
from .checkpoint import load_checkpoint, load_pretrained, read_checkpoint, save_checkpoint
from .optim import OptimizerState, Schedule, adamw_step, lr_at

__all__ = [
    "DiffArray", "OptimizerState", "Schedule", "adamw_step", "backward", "default_dtype",
    "graph_inventory", "load_checkpoint", "load_pretrained", "lr_at", "no_grad", "ops",
    "precision", "read_checkpoint", "save_checkpoint", "scope",
]
