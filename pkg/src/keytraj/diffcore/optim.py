"""Adam / AdamW with bias correction and decoupled weight decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable

import numpy as np

from .node import Array, GradientMap, ParamTensor

ALGORITHMS = ("adam", "adamw")


@dataclass
class OptimizerState:
    algorithm: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, Array] = field(default_factory=dict)
    v: Dict[str, Array] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown optimizer {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.step < 0:
            raise ValueError("step count must be >= 0")


def init_optimizer(
    algorithm: str,
    params: Iterable[ParamTensor],
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
    weight_decay: float = 0.0,
) -> OptimizerState:
    state = OptimizerState(
        algorithm=algorithm,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        weight_decay=weight_decay,
    )
    for p in params:
        state.m[p.name] = np.zeros_like(p.values)
        state.v[p.name] = np.zeros_like(p.values)
    return state


def optimizer_step(
    state: OptimizerState,
    params: Iterable[ParamTensor],
    grads: GradientMap,
):
    """One in-place update of every tensor in ``params``.

    adam folds weight decay into the gradient (classic L2); adamw applies it
    decoupled, so zero gradients still shrink each tensor by (1 - lr*wd).
    """
    params = list(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    lr, eps, wd = state.learning_rate, state.epsilon, state.weight_decay
    for p in params:
        g = grads.get(p.name)
        if g is None:
            raise KeyError(f"no gradient for parameter {p.name!r}")
        if g.shape != p.values.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {p.name!r} "
                f"shape {p.values.shape}"
            )
        g = g.astype(p.values.dtype, copy=False)
        if state.algorithm == "adam" and wd != 0.0:
            g = g + wd * p.values
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.values -= lr * update
        if state.algorithm == "adamw" and wd != 0.0:
            p.values -= lr * wd * p.values
    return params, state


def clip_grad_norm(grads: GradientMap, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= ``max_norm``.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm
