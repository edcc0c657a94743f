"""Minimal differentiable substrate: tensors, reverse-mode gradients, checks."""

from .grad import GradCheckReport, evaluate_with_gradients, grad_check, relative_error
from .optim import Adam
from .rng import make_rng, restore_rng, rng_state
from .tensor import (
    GradTape,
    NonFiniteError,
    NumericsError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    exp,
    get_dtype,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    precision,
    reshape,
    set_precision,
    slice_,
    softmax,
    sqrt,
    sum_,
    tanh,
    transpose,
)


def gelu(x):
    """Tanh approximation of GELU composed from primitives."""
    inner = tanh(mul(add(x, mul(mul(mul(x, x), x), 0.044715)), 0.7978845608028654))
    return mul(mul(x, 0.5), add(inner, 1.0))


def square(x):
    return mul(x, x)


__all__ = [
    "Adam", "GradCheckReport", "GradTape", "NonFiniteError", "NumericsError", "ShapeError",
    "Tensor", "add", "as_tensor", "broadcast_to", "concat", "evaluate_with_gradients", "exp",
    "gelu", "get_dtype", "grad_check", "layer_norm", "log", "make_rng", "matmul", "mean", "mul",
    "precision", "relative_error", "reshape", "restore_rng", "rng_state", "set_precision",
    "slice_", "softmax", "sqrt", "square", "sum_", "tanh", "transpose",
]
