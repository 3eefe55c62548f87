"""Dense layers and loss primitives on top of the autodiff graph."""

from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np

from .node import (
    Node,
    ParamTensor,
    Tape,
    absolute,
    as_node,
    exp,
    logsumexp,
    matmul,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    sub,
    tanh,
)

_ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "identity": None,
    None: None,
}

LOSS_KINDS = ("mse", "mae", "nll_gaussian")


def _lift(p, tape: Tape | None) -> Node:
    # without a tape (inference) parameters enter the graph as constants
    if isinstance(p, Node):
        return p
    if isinstance(p, ParamTensor):
        return tape.leaf(p) if tape is not None else as_node(p.values)
    return as_node(p)


def mlp_apply(layers: Sequence[Tuple], x, tape: Tape | None = None) -> Node:
    """Apply a stack of dense layers ``(weight, bias, activation)`` to ``x``.

    ``x`` may be a vector (feature axis last) or a batch of row vectors.
    Weights are ``(fan_in, fan_out)``; activation is one of
    ``relu | tanh | sigmoid | identity | None``.
    """
    h = as_node(x)
    was_vector = h.value.ndim == 1
    if was_vector:
        h = reshape(h, (1, -1))
    if h.value.ndim != 2:
        raise ValueError(f"mlp_apply expects a vector or a 2-D batch, got shape {h.value.shape}")
    for i, (w, b, act) in enumerate(layers):
        wn = _lift(w, tape)
        bn = _lift(b, tape)
        if act not in _ACTIVATIONS:
            raise ValueError(f"layer {i}: unknown activation {act!r}")
        if wn.value.ndim != 2:
            raise ValueError(f"layer {i}: weight must be 2-D, got shape {wn.value.shape}")
        if h.value.shape[-1] != wn.value.shape[0]:
            raise ValueError(
                f"layer {i}: input width {h.value.shape[-1]} does not match "
                f"weight fan-in {wn.value.shape[0]}"
            )
        if bn.value.shape != (wn.value.shape[1],):
            raise ValueError(
                f"layer {i}: bias shape {bn.value.shape} does not match fan-out "
                f"{wn.value.shape[1]}"
            )
        h = matmul(h, wn) + bn
        fn = _ACTIVATIONS[act]
        if fn is not None:
            h = fn(h)
    if was_vector:
        h = reshape(h, (h.value.shape[-1],))
    return h


def regression_loss(kind: str, pred, target) -> Node:
    """Mean-reduced regression loss.

    ``mse`` and ``mae`` take pred/target of equal shape.  ``nll_gaussian``
    takes ``pred = (mean, log_variance)``, both shaped like ``target``, and
    returns the mean Gaussian negative log-likelihood.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if kind == "nll_gaussian":
        if not (isinstance(pred, tuple) and len(pred) == 2):
            raise ValueError("nll_gaussian pred must be a (mean, log_variance) pair")
        mean_n, logvar_n = as_node(pred[0]), as_node(pred[1])
        t = as_node(target)
        if mean_n.value.shape != t.value.shape or logvar_n.value.shape != t.value.shape:
            raise ValueError(
                f"nll_gaussian shape mismatch: mean {mean_n.value.shape}, "
                f"log_variance {logvar_n.value.shape}, target {t.value.shape}"
            )
        d = sub(t, mean_n)
        sq = mul(d, d)
        precision = exp(neg(logvar_n))
        per_elem = logvar_n + mul(sq, precision)
        return reduce_mean(per_elem) * 0.5 + 0.5 * math.log(2 * math.pi)
    p = as_node(pred)
    t = as_node(target)
    if p.value.shape != t.value.shape:
        raise ValueError(f"shape mismatch: pred {p.value.shape} vs target {t.value.shape}")
    d = sub(p, t)
    if kind == "mse":
        return reduce_mean(mul(d, d))
    return reduce_mean(absolute(d))


def cross_entropy(logits, target_index) -> Node:
    """Softmax cross-entropy.

    ``logits`` is a K-vector or an (R, K) batch; ``target_index`` is an int or
    an array of R ints.  Returns the mean over rows.
    """
    z = as_node(logits)
    if z.value.ndim == 1:
        z = reshape(z, (1, -1))
        targets = np.asarray([int(target_index)])
    else:
        targets = np.asarray(target_index, dtype=int).reshape(-1)
    rows, k = z.value.shape
    if targets.shape != (rows,):
        raise ValueError(f"expected {rows} target indices, got {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= k):
        raise ValueError(f"target index out of range for {k} classes")
    onehot = np.zeros((rows, k), dtype=z.value.dtype)
    onehot[np.arange(rows), targets] = 1
    picked = reduce_sum(mul(z, onehot), axis=1)
    lse = logsumexp(z, axis=1)
    return reduce_mean(sub(lse, picked))
