"""A small reverse-mode autodiff over dense float64 numpy arrays.

Only the primitives needed by the contrastive loss and the toy encoders are
provided. Each primitive records its parents and a vector-Jacobian product;
``grad_eval`` walks the graph in reverse topological order and accumulates
gradients into every tensor that requires them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class UnsupportedPrimitive(TypeError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = _as_array(value)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(self.value) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, other):
        raise UnsupportedPrimitive("power is not a supported primitive")

    def __rtruediv__(self, other):
        return div(other, self)


def Parameter(value, name: str = "") -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer, np.ndarray, list, tuple)):
        return Tensor(x)
    raise UnsupportedPrimitive(f"cannot use {type(x).__name__} in a graph")


def _node(value: np.ndarray, parents: Iterable[Tensor], vjp, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(value)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    out.op = op
    return out


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    """Elementwise ``a / b``; ``b`` may be a scalar or a broadcastable tensor."""
    a, b = _lift(a), _lift(b)
    out = a.value / b.value
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
        "div",
    )


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise UnsupportedPrimitive("matmul is defined for 2-D operands only")
    return _node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = _lift(a)
    return _node(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def row_softmax(a) -> Tensor:
    a = _lift(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (a,), vjp, "row_softmax")


def row_log_softmax(a) -> Tensor:
    a = _lift(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _node(out, (a,), vjp, "row_log_softmax")


def row_l2norm(a) -> Tensor:
    """Euclidean norm of each row, shape (n, 1)."""
    a = _lift(a)
    out = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    return _node(out, (a,), lambda g: (g * a.value / out,), "row_l2norm")


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _lift(a)
    if axis is None:
        return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    out = a.value.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.value.size
        return _node(np.asarray(a.value.mean()), (a,), lambda g: (np.full(a.shape, g / n),), "mean")
    n = a.value.shape[axis]
    out = a.value.mean(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "transpose": transpose,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "row_softmax": row_softmax,
    "row_log_softmax": row_log_softmax,
    "row_l2norm": row_l2norm,
    "sum": sum,
    "mean": mean,
}


def apply(op: str, *args, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise UnsupportedPrimitive(op) from None
    return fn(*args, **kwargs)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad_eval(output: Tensor, seed: np.ndarray | float = 1.0) -> None:
    """Backpropagate from ``output`` into every leaf that requires grad.

    Leaf gradients accumulate (call ``zero_grad`` between evaluations);
    interior nodes use scratch buffers and are left untouched.
    """
    if not output.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(output): np.broadcast_to(_as_array(seed), output.shape).copy()}
    for node in reversed(_toposort(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
