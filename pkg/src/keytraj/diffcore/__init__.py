"""Minimal reverse-mode autodiff core on numpy arrays.

The computation graph built by the ops in :mod:`keytraj.diffcore.node` is the
tape; a :class:`Tape` instance additionally tracks which named parameters were
used in one evaluation context so gradients can be collected by name.
"""

from .node import (
    GradientMap,
    Node,
    ParamTensor,
    Tape,
    absolute,
    add,
    as_node,
    backprop,
    concat,
    exp,
    getitem,
    log,
    logsumexp,
    matmul,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    sub,
    tanh,
)
from .layers import cross_entropy, mlp_apply, regression_loss
from .optim import OptimizerState, clip_grad_norm, init_optimizer, optimizer_step
from .gradcheck import finite_diff_check, relu_kink_margin

__all__ = [
    "GradientMap",
    "Node",
    "ParamTensor",
    "Tape",
    "absolute",
    "add",
    "as_node",
    "backprop",
    "concat",
    "cross_entropy",
    "exp",
    "finite_diff_check",
    "relu_kink_margin",
    "getitem",
    "init_optimizer",
    "clip_grad_norm",
    "log",
    "logsumexp",
    "matmul",
    "mlp_apply",
    "mul",
    "neg",
    "OptimizerState",
    "optimizer_step",
    "reduce_mean",
    "reduce_sum",
    "regression_loss",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "stack",
    "sub",
    "tanh",
]
