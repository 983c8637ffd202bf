"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every node is a :class:`Var` holding a float64 array. Operations record a
closure that maps the output gradient to parent gradients; :meth:`Var.backward`
walks the graph in reverse topological order.

Example:
    >>> w = Var(np.array([[2.0]]), requires_grad=True)
    >>> loss = (constant(np.array([[3.0]])) @ w).sum()
    >>> loss.backward()
    >>> w.grad
    array([[3.]])
"""

import numpy as np


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self):
        return total(self)

    def mean(self):
        return mul(total(self), constant(1.0 / self.value.size))


def constant(value):
    return Var(value)


def _lift(x):
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad, shape):
    # sum out axes that were broadcast in the forward pass
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Var(a.value + b.value, parents=(a, b), backward=backward)


def sub(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Var(a.value - b.value, parents=(a, b), backward=backward)


def mul(a, b):
    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Var(a.value * b.value, parents=(a, b), backward=backward)


def matmul(a, b):
    """2-d matrix product."""

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return Var(a.value @ b.value, parents=(a, b), backward=backward)


def total(a):
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Var(np.sum(a.value), parents=(a,), backward=backward)


def square(a):
    def backward(g):
        return (2.0 * a.value * g,)

    return Var(a.value * a.value, parents=(a,), backward=backward)


def tanh(a):
    out = np.tanh(a.value)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Var(out, parents=(a,), backward=backward)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a):
    s = _sigmoid(a.value)
    out = a.value * s

    def backward(g):
        return (g * (s + a.value * s * (1.0 - s)),)

    return Var(out, parents=(a,), backward=backward)


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.shape),)

    return Var(a.value.reshape(shape), parents=(a,), backward=backward)


def concat(parts, axis=-1):
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(np.concatenate([p.value for p in parts], axis=axis),
               parents=tuple(parts), backward=backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under row-wise ``logits``."""
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    idx = np.arange(n)
    loss = -logp[idx, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[idx, labels] -= 1.0
        return (g * p / n,)

    return Var(loss, parents=(logits,), backward=backward)
