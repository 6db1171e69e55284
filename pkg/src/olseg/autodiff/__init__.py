from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (
    batch_norm,
    conv2d,
    maxpool2,
    prelu,
    soft_argmax,
    softmax,
    upsample_bilinear2,
)
from .optim import Adam, OptimState, adam_step
from .tensor import (
    Tensor,
    absolute,
    as_tensor,
    concat,
    exp,
    log,
    matmul,
    mean,
    reshape,
    stack,
    transpose,
    where,
)

__all__ = [
    "Adam", "CheckpointError", "OptimState", "Tensor", "absolute", "adam_step", "as_tensor",
    "batch_norm", "concat", "conv2d", "exp", "load_checkpoint", "log", "matmul", "maxpool2",
    "mean", "prelu", "reshape", "save_checkpoint", "soft_argmax", "softmax", "stack",
    "transpose", "upsample_bilinear2", "where",
]
