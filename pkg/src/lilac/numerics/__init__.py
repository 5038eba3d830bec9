"""Dense float64 tensor math with reverse-mode autodiff."""

from .gradcheck import gradient_check
from .tensor import (
    IndexOutOfRange,
    NonFiniteValue,
    ShapeMismatch,
    Tensor,
    abs_,
    add,
    as_tensor,
    attention,
    broadcast_to,
    causal_mask,
    concat,
    exp,
    getitem,
    is_grad_enabled,
    l1_loss,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    stack,
    sub,
    sum_,
    tanh,
    topological_order,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
