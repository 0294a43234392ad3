"""Reverse-mode autodiff over numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. Shapes must match exactly for
binary ops; the only broadcast allowed is against a Python scalar.
"""
import contextlib
import threading

import numpy as np

from ..errors import StateError

# per thread, so pipeline stages running inference cannot switch off another thread's tape
_mode = threading.local()


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def grad_enabled():
    return getattr(_mode, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic sugar, all routed through the ops below
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
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """Trainable leaf with a unique name; gradients accumulate into ``grad``."""
    __slots__ = ("name",)

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make(data, parents, backward_fn):
    """Create an op output; ``backward_fn(g)`` returns one gradient per parent."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward needs a Tensor")
    if not loss.requires_grad:
        raise StateError("backward called on a tensor with no recorded graph")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops

def _pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        return a, b
    if isinstance(a, Tensor):
        if np.ndim(b) != 0 and np.shape(b) != a.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {np.shape(b)}")
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if np.ndim(a) != 0 and np.shape(a) != b.shape:
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {b.shape}")
    return Tensor(np.asarray(a, dtype=b.dtype)), b


def _fit(g, shape):
    # gradient flowing to a scalar constant operand
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = _pair(a, b)
    return make(a.data + b.data, (a, b),
                lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return make(a.data - b.data, (a, b),
                lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return make(a.data * b.data, (a, b),
                lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return make(out, (a, b),
                lambda g: (_fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)))


def power(a, k):
    k = float(k)
    return make(a.data ** k, (a,), lambda g: (g * k * a.data ** (k - 1),))


def sqrt(a):
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a):
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a):
    return make(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a):
    return make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo, hi):
    """Clamp; gradient passes only where the input lies strictly inside."""
    inside = (a.data > lo) & (a.data < hi)
    return make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def total(a):
    return make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a):
    n = a.data.size
    return make(a.data.mean(), (a,),
                lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a, shape):
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx):
    def bw(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)
    return make(a.data[idx], (a,), bw)


def concat(tensors, axis=1):
    tensors = list(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    if axis == 1 and tensors[0].ndim == 4:
        # channel concat done channels-last so conv inputs stay NHWC-backed
        data = np.concatenate([t.data.transpose(0, 2, 3, 1) for t in tensors], axis=3)
        data = data.transpose(0, 3, 1, 2)
    else:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    return make(data, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def relu(a):
    pos = a.data > 0
    return make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def sigmoid(a):
    x = a.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return make(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a, linear_above=20.0):
    x = a.data
    big = x > linear_above
    out = np.where(big, x, np.log1p(np.exp(np.minimum(x, linear_above)))).astype(a.dtype)

    def bw(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig.astype(a.dtype),)
    return make(out, (a,), bw)
