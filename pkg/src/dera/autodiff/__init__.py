"""Reverse-mode differentiation substrate."""

from .tensor import (
    ContractError,
    GradientVector,
    NondiffTape,
    NumericError,
    ParamStore,
    Parameter,
    Tensor,
    absolute,
    accumulate_into_grads,
    add,
    argmin_rows,
    backward,
    broadcast_to,
    clip_unit,
    concat,
    constant,
    cosine_similarity,
    cross_entropy_with_logits,
    div,
    embedding,
    exp,
    frozen_choice,
    gelu,
    layer_norm,
    log,
    matmul,
    mul,
    permute,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    softmax,
    sqrt,
    stop_gradient,
    straight_through,
    sub,
    swapaxes,
    take_slice,
)
from .gradcheck import GradCheckReport, catalogue, grad_check, run_catalogue

__all__ = [
    "ContractError",
    "GradientVector",
    "NondiffTape",
    "NumericError",
    "ParamStore",
    "Parameter",
    "Tensor",
    "absolute",
    "accumulate_into_grads",
    "add",
    "argmin_rows",
    "backward",
    "broadcast_to",
    "clip_unit",
    "concat",
    "constant",
    "cosine_similarity",
    "cross_entropy_with_logits",
    "div",
    "embedding",
    "exp",
    "frozen_choice",
    "gelu",
    "layer_norm",
    "log",
    "matmul",
    "mul",
    "permute",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "softmax",
    "sqrt",
    "stop_gradient",
    "straight_through",
    "sub",
    "swapaxes",
    "take_slice",
    "GradCheckReport",
    "catalogue",
    "grad_check",
    "run_catalogue",
]
