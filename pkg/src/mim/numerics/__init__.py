"""Dense float64 compute core with tape-based reverse-mode gradients."""
from .primitives import (
    PRIMITIVES,
    add,
    add_scalar,
    affine,
    bce_with_logits,
    concat,
    cosine,
    cosine_matrix,
    dot,
    expand,
    gather,
    log_sum_exp,
    mean,
    mul,
    outer_product_augmented,
    pick,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    sum_,
    weighted_sum,
)
from .params import SGD, Adam, bind, collect_grads, init_mlp, make_optimizer, mlp
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, Var, as_array, backward, finite_diff, forward

__all__ = [
    "PRIMITIVES", "SGD", "Adam", "NonFiniteError", "ShapeError", "Tape", "Tensor", "Var",
    "add", "add_scalar", "affine", "as_array", "backward", "bce_with_logits", "bind", "collect_grads",
    "concat", "cosine", "cosine_matrix", "dot", "expand", "finite_diff", "forward", "gather",
    "init_mlp", "log_sum_exp", "make_optimizer", "mean", "mlp", "mul", "outer_product_augmented",
    "pick", "relu", "reshape", "scale", "sigmoid", "softmax", "sub", "sum_", "weighted_sum",
]
