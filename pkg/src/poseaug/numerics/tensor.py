"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when any input requires a
gradient, records the operation that produced it.  ``loss.backward()`` walks
the recorded graph in reverse topological order and accumulates
``d loss / d node`` into ``node.grad`` for every reachable node that requires
a gradient.  The graph is released after the pass, so a second ``backward``
on the same loss raises.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def as_array(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")
    # make numpy defer binary operators (ndarray @ Tensor etc.) to Tensor
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        """Create a result node; ``backward(g)`` returns one grad per parent."""
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad=None):
        if self._consumed:
            raise ContractError("backward called twice on the same graph; rebuild the loss first")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            self._consumed = True
            return

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
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
        self._consumed = True

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        x, y = self.data, other.data
        return Tensor._make(x * y, (self, other),
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        x, y = self.data, other.data
        out = x / y
        return Tensor._make(out, (self, other),
                            lambda g: (_unbroadcast(g / y, x.shape),
                                       _unbroadcast(-g * out / y, y.shape)))

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return Tensor._make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_wrap(other), self)

    def __getitem__(self, idx):
        x = self.data
        if isinstance(idx, Tensor):
            raise TypeError("index with arrays, not Tensors")

        def bw(g):
            out = np.zeros_like(x)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(x[idx], (self,), bw)

    # -- unary functions --------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def leaky_relu(self, slope=0.2):
        scale = np.where(self.data > 0, 1.0, slope)
        return Tensor._make(self.data * scale, (self,), lambda g: (g * scale,))

    def softplus(self):
        x = self.data
        out = np.logaddexp(0.0, x)
        return Tensor._make(out, (self,), lambda g: (g / (1.0 + np.exp(-x)),))

    def clip_max(self, hi):
        """min(x, hi); gradient is zero where the bound is active."""
        x = self.data
        mask = x <= hi
        return Tensor._make(np.minimum(x, hi), (self,), lambda g: (g * mask,))

    # -- reductions and layout ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def swapaxes(self, a, b):
        return Tensor._make(np.swapaxes(self.data, a, b), (self,),
                            lambda g: (np.swapaxes(g, a, b),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {x.shape} @ {y.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(x @ y, (a, b), bw)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def where(mask, a, b):
    """Select ``a`` where ``mask`` holds, else ``b``; ``mask`` is constant."""
    a, b = _wrap(a), _wrap(b)
    mask = np.asarray(mask, dtype=bool)
    return Tensor._make(np.where(mask, a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(g * mask, a.shape),
                                   _unbroadcast(g * ~mask, b.shape)))
