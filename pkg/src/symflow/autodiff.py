"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is define-by-run: every operation allocates a fresh Node holding the
forward value, references to its parents, and one vector-Jacobian closure per
parent. ``backward`` walks the graph once in reverse topological order and
accumulates gradients, so a node feeding several consumers receives the sum of
all contributions.
"""

import numpy as np


class ShapeError(ValueError):
    pass


class SingularMatrixError(ValueError):
    def __init__(self, pivot):
        super().__init__(f"matrix is numerically singular (pivot magnitude {pivot:.3e})")
        self.pivot = pivot


class Node:
    """A value in the computation graph with a gradient accumulator.

    ``needs_grad`` propagates from parents; constants opt out so backward
    never walks into them. Bare leaves participate by default.
    """

    __slots__ = ("value", "grad", "parents", "vjps", "needs_grad")

    def __init__(self, value, parents=(), vjps=(), needs_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjps = vjps
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents) if parents else True
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={not self.parents})"

    # arithmetic sugar; constants are lifted to leaf nodes
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


class Parameter:
    """Named trainable leaf. The wrapped node persists across training steps."""

    def __init__(self, name, value, trainable=True):
        self.name = name
        self.node = Node(np.array(value, dtype=np.float64))
        self.trainable = trainable

    @property
    def value(self):
        return self.node.value

    @value.setter
    def value(self, new):
        self.node.value = np.asarray(new, dtype=np.float64)

    @property
    def grad(self):
        return self.node.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.node.value.shape})"


def as_node(x):
    if isinstance(x, Node):
        return x
    if isinstance(x, Parameter):
        return x.node
    return Node(x)


def constant(x):
    return Node(x, needs_grad=False)


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value + b.value, (a, b),
                (lambda g: _unbroadcast(g, a.value.shape),
                 lambda g: _unbroadcast(g, b.value.shape)))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value - b.value, (a, b),
                (lambda g: _unbroadcast(g, a.value.shape),
                 lambda g: _unbroadcast(-g, b.value.shape)))


def neg(a):
    a = as_node(a)
    return Node(-a.value, (a,), (lambda g: -g,))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value * b.value, (a, b),
                (lambda g: _unbroadcast(g * b.value, a.value.shape),
                 lambda g: _unbroadcast(g * a.value, b.value.shape)))


def div(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value / b.value, (a, b),
                (lambda g: _unbroadcast(g / b.value, a.value.shape),
                 lambda g: _unbroadcast(-g * a.value / b.value ** 2, b.value.shape)))


def power(a, exponent):
    if isinstance(exponent, Node):
        raise TypeError("only constant exponents are supported")
    a = as_node(a)
    return Node(a.value ** exponent, (a,),
                (lambda g: g * exponent * a.value ** (exponent - 1),))


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 1-D or 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")
    out = av @ bv

    def grad_a(g):
        if bv.ndim == 1:
            return np.outer(g, bv) if av.ndim == 2 else g * bv
        ga = g @ bv.T
        return ga

    def grad_b(g):
        if av.ndim == 1:
            return np.outer(av, g) if bv.ndim == 2 else g * av
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return Node(out, (a, b), (grad_a, grad_b))


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), (lambda g: g * out,))


def log(a):
    a = as_node(a)
    return Node(np.log(a.value), (a,), (lambda g: g / a.value,))


def sqrt(a):
    a = as_node(a)
    out = np.sqrt(a.value)
    return Node(out, (a,), (lambda g: g * 0.5 / out,))


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, (a,), (lambda g: g * (1.0 - out ** 2),))


def sigmoid(a):
    a = as_node(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Node(out, (a,), (lambda g: g * out * (1.0 - out),))


def relu(a):
    a = as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), (lambda g: g * mask,))


def softplus(a):
    a = as_node(a)
    out = np.logaddexp(0.0, a.value)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Node(out, (a,), (lambda g: g * s,))


def sin(a):
    a = as_node(a)
    return Node(np.sin(a.value), (a,), (lambda g: g * np.cos(a.value),))


def cos(a):
    a = as_node(a)
    return Node(np.cos(a.value), (a,), (lambda g: -g * np.sin(a.value),))


def cosh(a):
    a = as_node(a)
    return Node(np.cosh(a.value), (a,), (lambda g: g * np.sinh(a.value),))


def sinh(a):
    a = as_node(a)
    return Node(np.sinh(a.value), (a,), (lambda g: g * np.cosh(a.value),))


def absolute(a):
    a = as_node(a)
    return Node(np.abs(a.value), (a,), (lambda g: g * np.sign(a.value),))


def sum(a, axis=None, keepdims=False):
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return Node(out, (a,), (vjp,))


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis=None, keepdims=False):
    a = as_node(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + m
    if not keepdims and axis is not None:
        out = np.squeeze(out, axis=axis)
    elif not keepdims:
        out = out.reshape(())
    softmax = shifted / total

    def vjp(g):
        if axis is None:
            return softmax * g
        gg = g if keepdims else np.expand_dims(g, axis)
        return softmax * gg

    return Node(out, (a,), (vjp,))


def reshape(a, shape):
    a = as_node(a)
    return Node(a.value.reshape(shape), (a,), (lambda g: g.reshape(a.value.shape),))


def roll(a, shift, axis):
    a = as_node(a)
    return Node(np.roll(a.value, shift, axis=axis), (a,),
                (lambda g: np.roll(g, -shift, axis=axis),))


def take(a, idx):
    a = as_node(a)
    out = a.value[idx]

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return full

    return Node(out, (a,), (vjp,))


def where(condition, a, b):
    """Select elementwise by a constant boolean mask (no gradient w.r.t. the mask)."""
    cond = np.asarray(condition, dtype=bool)
    a, b = as_node(a), as_node(b)
    return Node(np.where(cond, a.value, b.value), (a, b),
                (lambda g: _unbroadcast(np.where(cond, g, 0.0), a.value.shape),
                 lambda g: _unbroadcast(np.where(cond, 0.0, g), b.value.shape)))


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([n.value for n in nodes], axis=axis)

    def make_vjp(i):
        def vjp(g):
            return np.split(g, splits, axis=axis)[i]
        return vjp

    return Node(out, tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes))))


def _lu_slogdet(mat, min_pivot=1e-300):
    """Log |det| and sign of one square matrix by LU with partial pivoting."""
    a = np.array(mat, dtype=np.float64)
    n = a.shape[0]
    sign = 1.0
    logabs = 0.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        pivot = abs(a[p, k])
        if pivot < min_pivot:
            raise SingularMatrixError(pivot)
        if p != k:
            a[[k, p]] = a[[p, k]]
            sign = -sign
        if a[k, k] < 0:
            sign = -sign
        logabs += np.log(pivot)
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    return logabs, sign


def _slogdet_values(m):
    """Batched (sign, log|det|) with the 2x2 case vectorized."""
    n = m.shape[-1]
    if n == 2:
        det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
        mag = np.abs(det)
        small = mag < 1e-300
        if np.any(small):
            raise SingularMatrixError(float(mag[small].min()) if mag.ndim else float(mag))
        return np.sign(det), np.log(mag)
    flat = m.reshape(-1, n, n)
    logabs = np.empty(flat.shape[0])
    sign = np.empty(flat.shape[0])
    for i, mi in enumerate(flat):
        logabs[i], sign[i] = _lu_slogdet(mi)
    return sign.reshape(m.shape[:-2]), logabs.reshape(m.shape[:-2])


def _inv_transpose(m):
    n = m.shape[-1]
    if n == 2:
        det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
        out = np.empty_like(m)
        out[..., 0, 0] = m[..., 1, 1]
        out[..., 0, 1] = -m[..., 1, 0]
        out[..., 1, 0] = -m[..., 0, 1]
        out[..., 1, 1] = m[..., 0, 0]
        return out / det[..., None, None]
    return np.swapaxes(np.linalg.inv(m), -1, -2)


def logdet(a):
    """Log absolute determinant of square (stacks of) matrices.

    Returns ``(node, sign)`` where the node carries log|det| per matrix and
    sign is a plain array of +-1. Gradient w.r.t. the matrix entries is the
    transposed inverse.
    """
    a = as_node(a)
    if a.value.ndim < 2 or a.value.shape[-1] != a.value.shape[-2]:
        raise ShapeError(f"logdet expects square matrices, got shape {a.value.shape}")
    sign, logabs = _slogdet_values(a.value)
    inv_t = _inv_transpose(a.value)

    def vjp(g):
        return np.asarray(g)[..., None, None] * inv_t

    return Node(logabs, (a,), (vjp,)), sign


def _toposort(root):
    """Reverse-topological order over the needs_grad subgraph of root."""
    order = []
    state = {}
    stack = [root]
    while stack:
        node = stack[-1]
        nid = id(node)
        st = state.get(nid, 0)
        if st == 0:
            state[nid] = 1
            for p in node.parents:
                if p.needs_grad and state.get(id(p), 0) == 0:
                    stack.append(p)
        else:
            stack.pop()
            if st == 1:
                state[nid] = 2
                order.append(node)
    return order


def backward(loss, params=None):
    """Backpropagate from a scalar loss; return a name->grad map if params given.

    Gradients accumulate lazily (a node feeding several consumers sums all
    contributions); each participating node is visited exactly once.
    """
    loss = as_node(loss)
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.needs_grad:
                continue
            contribution = vjp(g)
            parent.grad = contribution if parent.grad is None else parent.grad + contribution
    if params is not None:
        return {p.name: (np.zeros_like(p.node.value) if p.node.grad is None else p.node.grad)
                for p in params}
    return None
