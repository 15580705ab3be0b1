from .gradcheck import finite_difference_check, numerical_grad, relative_error
from .optim import (
    AdamState,
    FrozenParameterError,
    NonFiniteError,
    adam_step,
    clip_by_global_norm,
    global_norm,
)
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    clip,
    concat,
    dropout,
    exp,
    gather_rows,
    log,
    log_softmax,
    matmul,
    mul,
    sigmoid,
    softmax,
    stack,
    sub,
    tanh,
    tsum,
)

__all__ = [
    "AdamState",
    "FrozenParameterError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "clip",
    "clip_by_global_norm",
    "concat",
    "dropout",
    "exp",
    "finite_difference_check",
    "gather_rows",
    "global_norm",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "numerical_grad",
    "relative_error",
    "sigmoid",
    "softmax",
    "stack",
    "sub",
    "tanh",
    "tsum",
]
