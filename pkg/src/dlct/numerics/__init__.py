from .tensor import (
    DTYPE,
    DomainError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp_min,
    concat,
    dropout,
    elementwise,
    embedding,
    exp,
    index,
    is_debug,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    record_kinks,
    parameter,
    relu,
    reshape,
    scale,
    set_debug,
    softmax,
    sub,
    sum_,
    swapaxes,
    transpose,
    zero_grads,
)
from .gradcheck import GradCheckReport, NonDeterministicError, directional_grad_check, grad_check, relative_error
from .io import FormatError, load_tensor, read_tensor, save_tensor, write_tensor

__all__ = [name for name in dir() if not name.startswith("_")]
