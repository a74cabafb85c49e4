"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Every op applied to tensors that
require gradients records its parents and a backward closure; calling
:func:`backward` on a scalar walks that dynamic tape in reverse topological
order. The tape is rebuilt on every forward pass.

Two precisions are supported: float64 for gradient checking and float32
for training. The active precision is thread-local and can be switched with
:func:`use_dtype`.
"""

import contextlib
import threading

import numpy as np
from scipy.sparse import csr_matrix

__all__ = [
    "Tensor", "NumericalError", "ShapeError", "tensor", "parameter", "constant",
    "use_dtype", "get_dtype", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "div", "matmul", "concat", "gather", "index",
    "reshape", "transpose", "sum", "mean", "relu", "softplus", "exp", "sin",
    "cos", "sqrt", "softmax", "layer_norm", "clamp", "backward", "gradcheck",
]


class NumericalError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


_local = threading.local()


def get_dtype():
    return getattr(_local, "dtype", np.float32)


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the precision used for new tensors."""
    prev = get_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else get_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

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
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, name=None):
    """Build a tensor in the active precision."""
    return Tensor(np.asarray(data, dtype=get_dtype()), requires_grad, name)


def parameter(data, name=None):
    return tensor(data, requires_grad=True, name=name)


def constant(data):
    return tensor(data)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _all_finite(data):
    # a finite sum implies finite entries; only overflowing sums need the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(data.sum()):
            return True
    return bool(np.all(np.isfinite(data)))


def _make(data, parents, backward_fn, op, checked=False):
    if not checked and not _all_finite(data):
        raise NumericalError(f"non-finite value produced by op '{op}'")
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ops


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise NumericalError("division by zero in op 'div'")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def matmul(a, b):
    """Matrix product with numpy batching semantics (both operands >= 2-D)."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


# structural ops


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            n != m for i, (n, m) in enumerate(zip(ref, t.shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def gather(x, indices, axis=0):
    """Take entries of ``x`` along ``axis`` with an integer index array.

    Output shape is ``x.shape[:axis] + indices.shape + x.shape[axis+1:]``.
    """
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise IndexError(f"gather: index out of range for axis of size {x.shape[ax]}")

    def bw(g):
        rest = x.shape[:ax] + x.shape[ax + 1:]
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        gx = _scatter_add(idx.reshape(-1) % x.shape[ax], gm.reshape(idx.size, -1), x.shape[ax])
        return (np.moveaxis(gx.reshape((x.shape[ax],) + rest), 0, ax),)

    return _make(np.take(x.data, idx, axis=ax), (x,), bw, "gather")


def _scatter_add(rows, values, n):
    """``out[rows[i]] += values[i]`` for 2-D ``values``."""
    if values.shape[1] == 1:
        return np.bincount(rows, weights=values[:, 0], minlength=n).astype(values.dtype)[:, None]
    sel = csr_matrix((np.ones(len(rows), dtype=values.dtype), (rows, np.arange(len(rows)))),
                     shape=(n, len(rows)))
    return np.asarray(sel @ values)


def index(x, key):
    """Basic (slice/int) indexing."""
    x = _as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make(np.array(x.data[key]), (x,), bw, "index")


def reshape(x, shape):
    x = _as_tensor(x)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes=None):
    x = _as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw, "transpose")


# reductions


def sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


# elementwise unary ops


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), bw, "relu")


def softplus(x):
    x = _as_tensor(x)

    def bw(g):
        return (g * _sigmoid(x.data),)

    return _make(np.logaddexp(0, x.data), (x,), bw, "softplus")


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e))


def exp(x):
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw, "exp")


def sin(x):
    x = _as_tensor(x)

    def bw(g):
        return (g * np.cos(x.data),)

    return _make(np.sin(x.data), (x,), bw, "sin")


def cos(x):
    x = _as_tensor(x)

    def bw(g):
        return (-g * np.sin(x.data),)

    return _make(np.cos(x.data), (x,), bw, "cos")


def sqrt(x):
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise NumericalError("negative input to op 'sqrt'")
    out = np.sqrt(x.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make(out, (x,), bw, "sqrt")


def softmax(x, axis=-1):
    x = _as_tensor(x)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        r = g - (g * out).sum(axis=axis, keepdims=True)
        r *= out
        return (r,)

    # the input was already checked; a shifted softmax is finite
    return _make(out, (x,), bw, "softmax", checked=True)


def layer_norm(x, eps=1e-5):
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    out = xc * inv

    def bw(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).sum(axis=-1, keepdims=True) / n
        return (inv * (g - gm - out * gxm),)

    return _make(out, (x,), bw, "layer_norm")


def clamp(x, lo, hi):
    """Clip ``x`` to ``[lo, hi]``; bounds may be scalars or tensors.

    Gradient w.r.t. ``x`` is 1 inside the interval and 0 outside it. When a
    bound is a tensor it receives the gradient wherever it is active.
    """
    x = _as_tensor(x)
    lo_t = lo if isinstance(lo, Tensor) else None
    hi_t = hi if isinstance(hi, Tensor) else None
    lo_v = lo.data if lo_t is not None else lo
    hi_v = hi.data if hi_t is not None else hi
    below = x.data < lo_v
    above = x.data > hi_v
    out = np.where(below, lo_v, np.where(above, hi_v, x.data)).astype(x.dtype)
    inside = ~(below | above)
    parents = (x,) + tuple(t for t in (lo_t, hi_t) if t is not None)

    def bw(g):
        grads = [g * inside]
        if lo_t is not None:
            grads.append(_unbroadcast(g * below, lo_t.shape))
        if hi_t is not None:
            grads.append(_unbroadcast(g * above, hi_t.shape))
        return tuple(grads)

    return _make(out, parents, bw, "clamp")


# backward pass


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt=None):
    """Populate ``.grad`` on every leaf that influences ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. If ``wrt`` is given,
    returns their gradients as a list, with zeros for tensors ``loss`` does
    not depend on.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = _topo_order(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                pg = np.asarray(pg, dtype=parent.dtype)
                grads[key] = grads[key] + pg if key in grads else pg
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def gradcheck(f, x, h=1e-5, coords=None, rng=None):
    """Compare analytic and central-difference gradients of scalar ``f``.

    ``x`` is a tensor or list of tensors. ``coords`` optionally limits the
    check to that many randomly chosen coordinates. Returns
    ``max |analytic - numeric| / max(1, |analytic|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs) if not isinstance(x, Tensor) else f(x)
    analytic = backward(out, xs)

    positions = [(i, j) for i, t in enumerate(xs) for j in range(t.size)]
    if coords is not None and coords < len(positions):
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(positions), size=coords, replace=False)
        positions = [positions[p] for p in sorted(pick)]

    def evaluate():
        with no_grad():
            val = f(*xs) if not isinstance(x, Tensor) else f(x)
        v = float(val.data.reshape(-1)[0])
        if not np.isfinite(v):
            raise NumericalError("gradcheck: function is non-finite near x")
        return v

    worst = 0.0
    for i, j in positions:
        flat = xs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = evaluate()
        flat[j] = orig - h
        fm = evaluate()
        flat[j] = orig
        numeric = (fp - fm) / (2 * h)
        a = float(analytic[i].reshape(-1)[j])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
