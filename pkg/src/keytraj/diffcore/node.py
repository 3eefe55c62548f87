"""Reverse-mode automatic differentiation over numpy arrays.

Every op returns a :class:`Node` holding the forward value plus, per parent,
a vector-Jacobian closure.  The graph reachable from a loss node is the tape;
:func:`backprop` walks it once in reverse topological order.  Gradients are
keyed by parameter name, so named leaves must be created through a
:class:`Tape` (one per evaluation context, never shared across threads).

Scalar constants are lifted with the dtype of the array operand so float32
graphs stay float32 end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

Array = np.ndarray
GradientMap = Dict[str, Array]


@dataclass
class ParamTensor:
    """A named learnable tensor. ``values`` is mutated in place by the optimizer."""

    name: str
    values: Array

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("parameter name must be non-empty")
        self.values = np.asarray(self.values)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"parameter {self.name!r} contains non-finite values")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


class Node:
    """One vertex of the computation graph.

    ``parents`` holds ``(parent, vjp)`` pairs where ``vjp`` maps the gradient
    w.r.t. this node to the gradient contribution for that parent.
    """

    __slots__ = ("value", "parents", "name", "op")

    def __init__(
        self,
        value: Array,
        parents: Tuple[Tuple["Node", Callable[[Array], Array]], ...] = (),
        name: str | None = None,
        op: str = "leaf",
    ) -> None:
        self.value = np.asarray(value)
        self.parents = parents
        self.name = name
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Node(op={self.op}, shape={self.value.shape}{tag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class Tape:
    """Tracks the named parameter leaves of one evaluation context.

    Wrapping the same :class:`ParamTensor` twice returns the same leaf node,
    so gradient contributions from every use accumulate on one leaf.
    """

    def __init__(self) -> None:
        self._leaves: Dict[str, Node] = {}

    def leaf(self, param: ParamTensor) -> Node:
        node = self._leaves.get(param.name)
        if node is None:
            node = Node(param.values, name=param.name, op="param")
            self._leaves[param.name] = node
        elif node.value is not param.values:
            raise ValueError(f"two distinct tensors registered under name {param.name!r}")
        return node

    @property
    def leaves(self) -> Dict[str, Node]:
        return dict(self._leaves)


def as_node(x, like: Node | None = None) -> Node:
    """Lift an array or scalar to a constant node; pass-through for nodes."""
    if isinstance(x, Node):
        return x
    if isinstance(x, ParamTensor):
        raise TypeError(
            f"parameter {x.name!r} must be wrapped via Tape.leaf() to receive gradients"
        )
    dtype = like.value.dtype if like is not None and np.isscalar(x) else None
    return Node(np.asarray(x, dtype=dtype), op="const")


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a = as_node(a, like=b if isinstance(b, Node) else None)
    b = as_node(b, like=a)
    value = a.value + b.value
    return Node(
        value,
        parents=(
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
        op="add",
    )


def sub(a, b) -> Node:
    a = as_node(a, like=b if isinstance(b, Node) else None)
    b = as_node(b, like=a)
    value = a.value - b.value
    return Node(
        value,
        parents=(
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
        op="sub",
    )


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, parents=((a, lambda g: -g),), op="neg")


def mul(a, b) -> Node:
    a = as_node(a, like=b if isinstance(b, Node) else None)
    b = as_node(b, like=a)
    value = a.value * b.value
    av, bv = a.value, b.value
    return Node(
        value,
        parents=(
            (a, lambda g: _unbroadcast(g * bv, av.shape)),
            (b, lambda g: _unbroadcast(g * av, bv.shape)),
        ),
        op="mul",
    )


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value
    return Node(
        av @ bv,
        parents=((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)),
        op="matmul",
    )


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0), parents=((a, lambda g: g * mask),), op="relu")


def tanh(a) -> Node:
    a = as_node(a)
    y = np.tanh(a.value)
    return Node(y, parents=((a, lambda g: g * (1 - y * y)),), op="tanh")


def sigmoid(a) -> Node:
    a = as_node(a)
    y = 0.5 * (np.tanh(0.5 * a.value) + 1)  # numerically stable logistic
    return Node(y, parents=((a, lambda g: g * y * (1 - y)),), op="sigmoid")


def exp(a) -> Node:
    a = as_node(a)
    y = np.exp(a.value)
    return Node(y, parents=((a, lambda g: g * y),), op="exp")


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node(np.log(av), parents=((a, lambda g: g / av),), op="log")


def absolute(a) -> Node:
    a = as_node(a)
    # subgradient 0 at the kink
    s = np.sign(a.value)
    return Node(np.abs(a.value), parents=((a, lambda g: g * s),), op="abs")


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    av = a.value
    value = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array) -> Array:
        if axis is None:
            return np.full(av.shape, g, dtype=av.dtype)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return Node(value, parents=((a, vjp),), op="sum")


def reduce_mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    av = a.value
    value = av.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= av.shape[ax]
    inv = 1.0 / count

    def vjp(g: Array) -> Array:
        gg = g * inv
        if axis is None:
            return np.full(av.shape, gg, dtype=av.dtype)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return Node(value, parents=((a, vjp),), op="mean")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    parts = [as_node(n) for n in nodes]
    if not parts:
        raise ValueError("concat of an empty sequence")
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g: Array) -> Array:
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Node(value, parents=tuple((p, make_vjp(i)) for i, p in enumerate(parts)), op="concat")


def stack(nodes: Sequence, axis: int = 0) -> Node:
    parts = [as_node(n) for n in nodes]
    if not parts:
        raise ValueError("stack of an empty sequence")
    value = np.stack([p.value for p in parts], axis=axis)

    def make_vjp(i: int):
        def vjp(g: Array) -> Array:
            return np.take(g, i, axis=axis)

        return vjp

    return Node(value, parents=tuple((p, make_vjp(i)) for i, p in enumerate(parts)), op="stack")


def reshape(a, shape) -> Node:
    a = as_node(a)
    av = a.value
    return Node(av.reshape(shape), parents=((a, lambda g: g.reshape(av.shape)),), op="reshape")


def getitem(a, key) -> Node:
    a = as_node(a)
    av = a.value
    value = av[key]

    def vjp(g: Array) -> Array:
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return out

    return Node(value, parents=((a, vjp),), op="getitem")


def softmax(a, axis: int = -1) -> Node:
    """Stable softmax along ``axis``; the max shift is treated as constant."""
    a = as_node(a)
    if a.value.size == 0:
        raise ValueError("softmax of an empty input")
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: Array) -> Array:
        dot = (g * y).sum(axis=axis, keepdims=True)
        return y * (g - dot)

    return Node(y, parents=((a, vjp),), op="softmax")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Node:
    a = as_node(a)
    if a.value.size == 0:
        raise ValueError("logsumexp of an empty input")
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    value = np.log(s) + m
    soft = e / s
    if not keepdims:
        value = np.squeeze(value, axis=axis)

    def vjp(g: Array) -> Array:
        gg = g if keepdims else np.expand_dims(g, axis)
        return soft * gg

    return Node(value, parents=((a, vjp),), op="logsumexp")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Node) -> list:
    """Iterative post-order: parents precede children in the returned list."""
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backprop(tape: Tape, loss: Node) -> GradientMap:
    """Gradients of a scalar ``loss`` for every parameter registered on ``tape``.

    Parameters the loss does not depend on get zero gradients.  The graph is
    not mutated, so repeated calls return identical maps.
    """
    if not isinstance(loss, Node):
        raise TypeError("loss must be a Node")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    order = _topo_order(loss)
    grads: Dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    out: GradientMap = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.name is not None:
            acc = out.get(node.name)
            out[node.name] = g if acc is None else acc + g
        for parent, vjp in node.parents:
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    for name, leaf in tape.leaves.items():
        if name not in out:
            out[name] = np.zeros_like(leaf.value)
    return out


def iter_nodes(root: Node):
    """Yield every node reachable from ``root`` (diagnostics, e.g. kink margins)."""
    yield from _topo_order(root)
