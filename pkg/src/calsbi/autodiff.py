"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic computation graph of `Value` nodes, rebuilt on every evaluation.
Arrays are numpy float64 throughout; gradients accumulate additively, so
calling backward twice without resetting doubles them. Comparison ops
produce plain 0/1 masks and never carry gradient.
"""

import contextlib

import numpy as np

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


_grad_enabled = True
_pass_grads = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Value:
    """A node in the backward graph: data, optional grad, parent record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self._op!r})"

    def detach(self):
        """A constant copy sharing this node's data, cut from the graph."""
        return Value(self.data)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _node(data, parents, op, backward):
        out = Value(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def _accum(self, grad):
        g = _unbroadcast(grad, self.data.shape)
        key = id(self)
        prev = _pass_grads.get(key)
        _pass_grads[key] = g if prev is None else prev + g

    def backward(self):
        """Add d(self)/d(leaf) into .grad of every reachable leaf.

        Gradients of one pass are kept in pass-local storage, so running
        backward twice on the same graph accumulates exactly twice the
        gradient into the leaves.
        """
        global _pass_grads
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        _pass_grads = {}
        try:
            self._accum(np.ones_like(self.data))
            for node in reversed(topo):
                g = _pass_grads.get(id(node))
                if g is not None and node._backward is not None:
                    node._backward(g)
            for node in topo:
                if node._backward is None:
                    g = _pass_grads.get(id(node))
                    if g is not None:
                        node.grad = g.copy() if node.grad is None else node.grad + g
        finally:
            _pass_grads = None

    # -- elementwise arithmetic ---------------------------------------------

    def _coerce(self, other):
        return other if isinstance(other, Value) else Value(other)

    @staticmethod
    def _elementwise(op, a, b, fn):
        try:
            return fn(a.data, b.data)
        except ValueError as exc:
            raise ShapeError(f"{op}: incompatible shapes {a.data.shape} "
                             f"and {b.data.shape}") from exc

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Value._elementwise("add", a, b, np.add)
        return Value._node(out, (a, b), "add",
                           lambda g: (a._accum(g), b._accum(g)))

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Value._node(-a.data, (a,), "neg", lambda g: a._accum(-g))

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Value._elementwise("subtract", a, b, np.subtract)
        return Value._node(out, (a, b), "sub",
                           lambda g: (a._accum(g), b._accum(-g)))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Value._elementwise("multiply", a, b, np.multiply)
        return Value._node(out, (a, b), "mul",
                           lambda g: (a._accum(g * b.data), b._accum(g * a.data)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Value._elementwise("divide", a, b, np.divide)

        def backward(g):
            a._accum(g / b.data)
            b._accum(-g * a.data / (b.data * b.data))

        return Value._node(out, (a, b), "div", backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

        def backward(g):
            a._accum(g @ b.data.T)
            b._accum(a.data.T @ g)

        return Value._node(a.data @ b.data, (a, b), "matmul", backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

        return Value._node(out, (a,), "sum", backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise functions ------------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Value._node(out, (a,), "exp", lambda g: a._accum(g * out))

    def log(self):
        a = self
        return Value._node(np.log(a.data), (a,), "log", lambda g: a._accum(g / a.data))

    def square(self):
        a = self
        return Value._node(a.data * a.data, (a,), "square",
                           lambda g: a._accum(2.0 * g * a.data))

    def abs(self):
        a = self
        return Value._node(np.abs(a.data), (a,), "abs",
                           lambda g: a._accum(g * np.sign(a.data)))

    def maximum_with(self, c):
        """Elementwise max(x, c) for a scalar constant c (rectifier for c=0)."""
        a = self
        c = float(c)
        mask = (a.data > c).astype(np.float64)
        return Value._node(np.maximum(a.data, c), (a,), "maximum_with",
                           lambda g: a._accum(g * mask))

    def relu(self):
        return self.maximum_with(0.0)

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Value._node(out, (a,), "tanh", lambda g: a._accum(g * (1.0 - out * out)))

    def sigmoid(self):
        a = self
        x = a.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return Value._node(out, (a,), "sigmoid",
                           lambda g: a._accum(g * out * (1.0 - out)))

    def selu(self):
        a = self
        x = a.data
        neg = np.minimum(x, 0.0)
        out = SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(neg))

        def backward(g):
            local = SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(neg))
            a._accum(g * local)

        return Value._node(out, (a,), "selu", backward)

    # -- structural ops --------------------------------------------------------

    def __getitem__(self, key):
        a = self
        out = a.data[key]

        def backward(g):
            full = np.zeros_like(a.data)
            full[key] += g
            a._accum(full)

        return Value._node(out, (a,), "slice", backward)

    def reshape(self, *shape):
        a = self
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape
        return Value._node(a.data.reshape(shape), (a,), "reshape",
                           lambda g: a._accum(g.reshape(a.data.shape)))

    def transpose(self):
        a = self
        return Value._node(a.data.T, (a,), "transpose", lambda g: a._accum(g.T))


def concat(values, axis=1):
    """Concatenate values along an axis; gradient splits back per operand."""
    values = [v if isinstance(v, Value) else Value(v) for v in values]
    datas = [v.data for v in values]
    base = datas[0].shape
    for d in datas[1:]:
        if len(d.shape) != len(base) or any(
                d.shape[i] != base[i] for i in range(len(base)) if i != axis):
            raise ShapeError(f"concat axis={axis}: incompatible shapes "
                             f"{[d.shape for d in datas]}")
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        for v, piece in zip(values, np.split(g, splits, axis=axis)):
            v._accum(piece)

    return Value._node(out, tuple(values), "concat", backward)


def repeat_rows(v, k):
    """Repeat each row of a 2D value k times consecutively: (n, m) -> (n*k, m)."""
    if v.data.ndim != 2:
        raise ShapeError(f"repeat_rows expects 2D input, got {v.data.shape}")
    n, m = v.data.shape
    out = np.repeat(v.data, k, axis=0)
    return Value._node(out, (v,), "repeat_rows",
                       lambda g: v._accum(g.reshape(n, k, m).sum(axis=1)))


def gather_rows(v, index):
    """Select rows by integer index; gradient scatter-adds back."""
    index = np.asarray(index, dtype=np.intp)
    out = v.data[index]

    def backward(g):
        full = np.zeros_like(v.data)
        np.add.at(full, index, g)
        v._accum(full)

    return Value._node(out, (v,), "gather_rows", backward)


def greater(a, b):
    """0/1 indicator mask of (a > b). Not differentiable by design."""
    a = a if isinstance(a, Value) else Value(a)
    b = b if isinstance(b, Value) else Value(b)
    return Value((a.data > b.data).astype(np.float64))


def less(a, b):
    """0/1 indicator mask of (a < b). Not differentiable by design."""
    a = a if isinstance(a, Value) else Value(a)
    b = b if isinstance(b, Value) else Value(b)
    return Value((a.data < b.data).astype(np.float64))


def straight_through(hard_data, soft):
    """Forward `hard_data`, backward routed through `soft` with unit gain."""
    out = Value._node(_as_array(hard_data), (soft,), "straight_through",
                      lambda g: soft._accum(g))
    return out
