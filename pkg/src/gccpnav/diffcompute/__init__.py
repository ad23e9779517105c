"""Minimal numpy autodiff used by the predictor and both policies."""

from . import nn, ops
from .params import (
    CHECKPOINT_VERSION,
    AdamConfig,
    CheckpointError,
    ParamStore,
    glorot_uniform,
    load_stores,
    read_checkpoint,
    save_stores,
    write_checkpoint,
)
from .tensor import (
    DetachedGraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    grad_enabled,
    no_grad,
)

__all__ = [
    "nn", "ops", "CHECKPOINT_VERSION", "AdamConfig", "CheckpointError", "ParamStore", "glorot_uniform",
    "load_stores", "read_checkpoint", "save_stores", "write_checkpoint", "DetachedGraphError",
    "NonFiniteError", "ShapeError", "Tensor", "as_tensor", "backward", "grad_enabled", "no_grad",
]
