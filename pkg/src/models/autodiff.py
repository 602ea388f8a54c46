"""
Minimal reverse-mode differentiation over numpy arrays.

A Tensor records the operation that produced it; backward() walks the graph in
reverse topological order and accumulates gradients into the leaves that
require them (model parameters, or inputs for attribution). Only the operations
the predictors need are provided.
"""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward_fn: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=float)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        # constant subgraphs keep no history
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data + b.data, parents=(a, b),
                      backward_fn=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data, parents=(self,), backward_fn=lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data * b.data, parents=(a, b),
                      backward_fn=lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data / b.data, parents=(a, b),
                      backward_fn=lambda g: (_unbroadcast(g / b.data, a.shape),
                                             _unbroadcast(-g * a.data / b.data ** 2, b.shape)))

    def __matmul__(self, other) -> "Tensor":
        """(..., k) @ (k, m); the right operand must be 2-D."""
        other = as_tensor(other)
        if other.ndim != 2:
            raise ValueError("Right matmul operand must be a matrix")
        a, b = self, other

        def backward(g):
            grad_a = g @ b.data.T
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[-1])
            return grad_a, grad_b

        return Tensor(a.data @ b.data, parents=(a, b), backward_fn=backward)

    # shape

    def __getitem__(self, index) -> "Tensor":
        """Basic (slice / integer) indexing."""
        a = self

        def backward(g):
            grad = np.zeros_like(a.data)
            grad[index] = g
            return (grad,)

        return Tensor(a.data[index], parents=(a,), backward_fn=backward)

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor(a.data.reshape(*shape), parents=(a,), backward_fn=lambda g: (g.reshape(a.shape),))

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        a = self

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor(a.data.sum(axis=axis), parents=(a,), backward_fn=backward)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    # graph

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf), weighted by grad, into every leaf requiring it."""
        if not self.requires_grad:
            return
        grad = np.ones_like(self.data) if grad is None else np.broadcast_to(np.asarray(grad, dtype=float), self.shape)
        pending = {id(self): grad}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def _topological_order(root: Tensor) -> List[Tensor]:
    # iterative post-order; recurrent graphs are too deep for recursion
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=float), requires_grad=True)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor(y, parents=(x,), backward_fn=lambda g: (g * (1.0 - y * y),))


def softplus(x: Tensor) -> Tensor:
    return Tensor(np.logaddexp(0.0, x.data), parents=(x,), backward_fn=lambda g: (g * expit(x.data),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor(np.stack([t.data for t in tensors], axis=axis), parents=tensors, backward_fn=backward)
