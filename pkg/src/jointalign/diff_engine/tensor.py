"""Minimal dense-tensor autodiff: numpy buffers plus a reverse-mode tape.

Tensors record the op that produced them; ``backward`` walks the implicit
graph in reverse topological order exactly once, accumulating gradients
additively at fan-out. float32 is the training dtype, float64 the mode used
for gradient checks. A graph can be explicitly freed, after which calling
backward through it is a lifecycle error; without freeing, repeated backward
calls accumulate into ``grad``.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class GraphFreedError(RuntimeError):
    """Backward was called through a freed or detached graph."""


class NumericError(ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_retain", "_parents",
                 "_backward", "_freed")

    # make numpy defer mixed ndarray/Tensor arithmetic to our operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self._retain = bool(requires_grad)  # leaves keep their gradient
        self.grad = None
        self._parents = ()
        self._backward = None
        self._freed = False

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def retain_grad(self) -> "Tensor":
        """Keep this (possibly intermediate) tensor's gradient after backward."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing -----------------------------------------------------
    def _set_creator(self, parents, backward_fn):
        if _grad_enabled and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = tuple(parents)
            self._backward = backward_fn
        return self

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def free_graph(self):
        """Drop saved activations; later backward through here raises."""
        for node in _toposort(self):
            node._parents = ()
            node._backward = None
            node._freed = True

    # -- operator sugar (definitions live in ops.py) -------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int)
                       else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a binary-op operand pair; scalars adopt the tensor's dtype."""
    if isinstance(a, Tensor):
        return a, (b if isinstance(b, Tensor) else _as_tensor(b, a.dtype))
    if isinstance(b, Tensor):
        return _as_tensor(a, b.dtype), b
    return _as_tensor(a), _as_tensor(b)


def _toposort(root: Tensor):
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None):
    """Reverse-mode pass from a scalar loss; populates ``grad`` on the way.

    Repeated calls (without zeroing) accumulate gradients additively.
    """
    if loss._freed:
        raise GraphFreedError("graph was freed; rebuild the forward pass")
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._freed:
            raise GraphFreedError("graph was freed; rebuild the forward pass")
        if node._retain and node.requires_grad:
            node._accumulate(g)
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] += pg
            else:
                grads[id(parent)] = pg.astype(parent.dtype, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)
    return out._set_creator((a, b), lambda g: (_unbroadcast(g, a.shape),
                                               _unbroadcast(g, b.shape)))

def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)
    return out._set_creator((a, b), lambda g: (_unbroadcast(g, a.shape),
                                               _unbroadcast(-g, b.shape)))

def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)
    return out._set_creator((a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                               _unbroadcast(g * a.data, b.shape)))

def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data / b.data)
    return out._set_creator(
        (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                           _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(-a.data)._set_creator((a,), lambda g: (-g,))

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)  # captured as array: no self-reference cycle
    out = Tensor(out_data)
    return out._set_creator((a,), lambda g: (g * out_data,))

def log(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(np.log(a.data))._set_creator((a,), lambda g: (g / a.data,))

def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    out = Tensor(out_data)
    return out._set_creator((a,), lambda g: (g * 0.5 / out_data,))

def sin(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(np.sin(a.data))._set_creator((a,), lambda g: (g * np.cos(a.data),))

def cos(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(np.cos(a.data))._set_creator((a,), lambda g: (-g * np.sin(a.data),))

def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    out = Tensor(out_data)
    return out._set_creator((a,), lambda g: (g * (1.0 - out_data * out_data),))

def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
    out = Tensor(out_data)
    return out._set_creator((a,), lambda g: (g * out_data * (1.0 - out_data),))

def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    return out._set_creator((a,), lambda g: (g * (a.data > 0),))

_GELU_C = 0.7978845608028654  # sqrt(2/pi)

def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return out._set_creator((a,), bwd)

def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(np.abs(a.data))._set_creator((a,), lambda g: (g * np.sign(a.data),))

def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data > lo) & (a.data < hi)
    return out._set_creator((a,), lambda g: (g * mask,))

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out._set_creator((a,), bwd)

def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else (
        np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / float(n))

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return out._set_creator((a, b), bwd)

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return out._set_creator((a,), lambda g: (g.reshape(a.shape),))

def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.data, ax1, ax2))
    return out._set_creator((a,), lambda g: (np.swapaxes(g, ax1, ax2),))

def take(a, idx) -> Tensor:
    """Basic slicing/indexing; gradients scatter back into the source."""
    a = _as_tensor(a)
    out = Tensor(a.data[idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g.reshape(full[idx].shape)
        return (full,)

    return out._set_creator((a,), bwd)

def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return out._set_creator(tuple(tensors), bwd)

def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return out._set_creator(tuple(tensors), bwd)

def linear_fused(x, w, b=None) -> Tensor:
    """x @ w + b with 2-D w, flattened to a single GEMM."""
    x, w = _as_tensor(x), _as_tensor(w)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out_data = x2 @ w.data
    if b is not None:
        b = _as_tensor(b)
        out_data += b.data
    out = Tensor(out_data.reshape(*lead, w.shape[-1]))

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return out._set_creator(parents, bwd)


def layer_norm_fused(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Fused last-axis layer normalization with optional affine params."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    ivar = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * ivar
    out_data = y
    if gamma is not None:
        gamma = _as_tensor(gamma)
        out_data = out_data * gamma.data
    if beta is not None:
        beta = _as_tensor(beta)
        out_data = out_data + beta.data
    out = Tensor(out_data)

    def bwd(g):
        red = tuple(range(g.ndim - 1))
        g_beta = g.sum(axis=red) if beta is not None else None
        gy = g * gamma.data if gamma is not None else g
        g_gamma = (g * y).sum(axis=red) if gamma is not None else None
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * y).mean(axis=-1, keepdims=True)
        gx = ivar * (gy - m1 - y * m2)
        outs = [gx]
        if gamma is not None:
            outs.append(g_gamma)
        if beta is not None:
            outs.append(g_beta)
        return tuple(outs)

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)
    return out._set_creator(tuple(parents), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax (row-max subtraction)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return out._set_creator((a,), bwd)
