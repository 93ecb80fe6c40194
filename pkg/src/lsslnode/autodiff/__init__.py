from .optim import AdamW, AdamWState, OneCycleSchedule, adamw_step
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    custom_op,
    cosine_similarity,
    cross_entropy,
    grad,
    is_grad_enabled,
    leaky_relu,
    linear,
    matmul,
    mse,
    mul,
    no_grad,
    scale_rows,
    sigmoid,
    square,
    stack_rows,
    sub,
    tanh,
    tmean,
    tsum,
)

__all__ = [
    "AdamW",
    "AdamWState",
    "OneCycleSchedule",
    "adamw_step",
    "NonFiniteError",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "custom_op",
    "cosine_similarity",
    "cross_entropy",
    "grad",
    "is_grad_enabled",
    "leaky_relu",
    "linear",
    "matmul",
    "mse",
    "mul",
    "no_grad",
    "scale_rows",
    "sigmoid",
    "square",
    "stack_rows",
    "sub",
    "tanh",
    "tmean",
    "tsum",
]
