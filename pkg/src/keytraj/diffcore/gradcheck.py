"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Tuple

import numpy as np

from .node import Node, ParamTensor, Tape, backprop


def finite_diff_check(
    loss_fn: Callable[[], Tuple[Node, Tape]],
    params: Iterable[ParamTensor],
    eps: float = 1e-6,
    return_details: bool = False,
):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the loss graph from the *current* values of
    ``params`` on every call and return ``(loss, tape)``.  Every element of
    every parameter is probed at ±eps, so keep the parameter count small.
    Relative error uses ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    params = list(params)
    for p in params:
        if p.values.dtype != np.float64:
            raise ValueError(
                f"finite_diff_check requires float64 parameters; {p.name!r} is {p.values.dtype}"
            )
    loss, tape = loss_fn()
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("non-finite loss at the base point")
    analytic = backprop(tape, loss)

    def probe() -> float:
        value = loss_fn()[0].value
        out = float(np.asarray(value).reshape(()))
        if not np.isfinite(out):
            raise FloatingPointError("non-finite loss while probing")
        return out

    worst = 0.0
    details: Dict[str, float] = {}
    for p in params:
        a = analytic.get(p.name)
        if a is None:
            raise KeyError(f"parameter {p.name!r} never joined the loss tape")
        flat = p.values.reshape(-1)
        a_flat = np.asarray(a, dtype=np.float64).reshape(-1)
        per_param = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = probe()
            flat[j] = orig - eps
            lo = probe()
            flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            denom = max(abs(a_flat[j]), abs(numeric), 1e-8)
            per_param = max(per_param, abs(a_flat[j] - numeric) / denom)
        details[p.name] = per_param
        worst = max(worst, per_param)
    if return_details:
        return worst, details
    return worst


def relu_kink_margin(loss: Node) -> float:
    """Smallest |pre-activation| feeding any relu in the graph under ``loss``.

    Used to reject probe points where a finite-difference step could cross a
    kink and poison the comparison.
    """
    from .node import iter_nodes

    margin = np.inf
    for node in iter_nodes(loss):
        if node.op == "relu":
            parent = node.parents[0][0]
            if parent.value.size:
                margin = min(margin, float(np.abs(parent.value).min()))
    return margin
