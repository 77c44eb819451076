"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and remembers the op that produced it.
Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates ``grad`` on every tensor that
requires it.
"""

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class PreconditionError(ValueError):
    """An op was called outside its documented domain."""


class StateError(RuntimeError):
    """Autodiff or optimizer state is not what the caller assumed."""


def _unbroadcast(grad, shape):
    # sum out the axes numpy broadcast over
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = _op
        self.name = name

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise PreconditionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_valid(self):
        """True when every value (and grad, if present) is finite."""
        if not np.all(np.isfinite(self.data)):
            return False
        return self.grad is None or bool(np.all(np.isfinite(self.grad)))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, op={self.op or 'leaf'})"

    # -- graph construction ---------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward, op):
        needs = any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
        if needs:
            out._backward = backward
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor.

        ``grad`` defaults to 1 and is only optional for single-element tensors.
        """
        if grad is None:
            if self.data.size != 1:
                raise PreconditionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = self._topo_order()
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _topo_order(self):
        order, seen = [], set()
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    # -- elementwise arithmetic -----------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accumulate(-g), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(a.data / b.data, (a, b), backward, "div")

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul {a.shape} @ {b.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")

    # -- reductions and reshaping ---------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        a = self
        return Tensor._make(
            a.data.reshape(*shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape"
        )

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: a._accumulate(g * mask), "relu")

    def abs(self):
        a = self
        sign = np.sign(a.data)
        return Tensor._make(np.abs(a.data), (a,), lambda g: a._accumulate(g * sign), "abs")

    def __getitem__(self, index):
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

        return Tensor._make(a.data[index], (a,), backward, "getitem")


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name=None):
    """Leaf tensor that participates in gradient computation."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
