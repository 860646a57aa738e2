from . import functional
from .functional import (
    attention,
    concat,
    cosine_distance,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    relu,
    sigmoid,
    softmax,
    stack,
)
from .optim import AdamW, OptimizerState, adamw_step, cosine_anneal_lr
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    get_dtype,
    get_precision,
    is_grad_enabled,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "AdamW", "NonFiniteError", "OptimizerState", "ShapeError", "Tensor",
    "adamw_step", "as_tensor", "attention", "backward", "concat", "cosine_anneal_lr",
    "cosine_distance", "cross_entropy", "embedding", "functional", "gelu", "get_dtype",
    "get_precision", "is_grad_enabled", "layer_norm", "linear", "log_softmax", "matmul",
    "no_grad", "precision", "relu",
    "set_precision", "sigmoid", "softmax", "stack",
]
