"""A small define-by-run reverse-mode autodiff engine over float64 numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a vector-Jacobian product. Node ids come from a global counter, so
sorting the reachable nodes by id yields a valid reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

_ids = itertools.count()
_grad_enabled = True
_checked = False


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked(enabled=True):
    """Raise ``FloatingPointError`` as soon as an op produces NaN or Inf."""
    global _checked
    prev, _checked = _checked, enabled
    try:
        yield
    finally:
        _checked = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_id", "_parents", "_vjp")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._id = next(_ids)
        self._parents = ()
        self._vjp = None

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
    def is_leaf(self):
        return self._vjp is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self):
        backward(self)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, vjp, name=None):
    if _checked and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite values produced by {name or 'op'}")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.name = name
    out._id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def custom_op(value, inputs, vjp, name="custom"):
    """Register an externally computed value with a user supplied VJP.

    ``vjp(g)`` must return one gradient array (or ``None``) per input.
    """
    inputs = tuple(as_tensor(x) for x in inputs)
    return _node(np.asarray(value, dtype=np.float64), inputs, vjp, name)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 1 and g.ndim > 1 and g.shape[-1] == shape[0]:
        return g.reshape(-1, shape[0]).sum(axis=0)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _node(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x):
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data**2)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def sqrt(x):
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def exp(x):
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def abs(x):  # noqa: A001
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


# -- reductions -------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return _node(
        np.sum(x.data, axis=axis, keepdims=keepdims), (x,),
        lambda g: (_expand(g, x.shape, axis, keepdims).copy(),), "sum",
    )


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return _node(
        np.mean(x.data, axis=axis, keepdims=keepdims), (x,),
        lambda g: (_expand(g, x.shape, axis, keepdims) / n,), "mean",
    )


def squared_norm(x, axis=-1, keepdims=False):
    return _node(
        np.sum(x.data * x.data, axis=axis, keepdims=keepdims), (x,),
        lambda g: (2.0 * x.data * _expand(g, x.shape, axis, keepdims),), "squared_norm",
    )


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(x, axis=-1, eps=1e-5):
    """Normalize to zero mean, unit variance along ``axis`` (no affine part)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (x,), vjp, "layer_norm")


# -- linear algebra and shape -----------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: contract all leading axes in one GEMM
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=-1):
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def spmm(A, x):
    """Constant sparse (or dense) matrix times a tensor."""
    return _node(A @ x.data, (x,), lambda g: (A.T @ g,), "spmm")


def _check_index(idx, n):
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for axis of length {n}")
    return idx


def _scatter_rows(idx, src, n):
    """``out[idx[i]] += src[i]`` for all i, via a sparse product (much faster than ufunc.at)."""
    flat = idx.reshape(-1)
    rows = src.reshape(flat.size, -1)
    S = sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
    return np.asarray(S @ rows).reshape((n,) + src.shape[idx.ndim:])


def gather(x, idx):
    """Rows of ``x`` selected by an integer array of any shape."""
    idx = _check_index(idx, x.shape[0])

    def vjp(g):
        return (_scatter_rows(idx, g, x.shape[0]),)

    return _node(x.data[idx], (x,), vjp, "gather")


def scatter_add(src, idx, n):
    """Sum rows of ``src`` into ``n`` output rows; ``idx`` has shape ``src.shape[:idx.ndim]``."""
    idx = _check_index(idx, n)
    if src.shape[: idx.ndim] != idx.shape:
        raise ValueError(f"scatter_add: index shape {idx.shape} does not match source {src.shape}")
    return _node(_scatter_rows(idx, src.data, n), (src,), lambda g: (g[idx],), "scatter_add")


def index(x, key):
    def vjp(g):
        out = np.zeros(x.shape)
        np.add.at(out, key, g)
        return (out,)

    return _node(np.array(x.data[key]), (x,), vjp, "index")


# -- backward ---------------------------------------------------------------


class Tape:
    """The recorded subgraph reachable from one output, in creation order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, output):
        seen = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._id))

    def is_topological(self):
        pos = {t._id: i for i, t in enumerate(self.nodes)}
        return all(pos[p._id] < pos[t._id] for t in self.nodes for p in t._parents if p._id in pos)


def backward(loss):
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads = {loss._id: np.ones(loss.shape)}
    for node in reversed(Tape.trace(loss).nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


def gradcheck(fn, inputs, eps=1e-6, seed=None):
    """Largest relative error between autodiff and central-difference gradients.

    ``fn`` maps a list of Tensors to a scalar Tensor. The relative error of each
    input is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-10)`` with
    norms taken over the whole gradient array.
    """
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(tensors)
    backward(out)
    worst = 0.0
    for k, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = np.zeros(t.shape)
        base = [np.array(x, dtype=np.float64) for x in inputs]
        flat = base[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = fn([Tensor(x) for x in base]).item()
            flat[i] = orig - eps
            with no_grad():
                fm = fn([Tensor(x) for x in base]).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
