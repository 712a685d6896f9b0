"""Dense tensors with a per-pass reverse-mode tape.

A ``Tensor`` wraps a contiguous numpy array. Operations on tensors that
require gradients record their parents and a backward closure; calling
``backward`` on a scalar walks that graph once in reverse topological order
and the graph is dropped with the last reference to the output.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, NonFiniteError, ShapeError
from . import kernels

DTYPES = {"single": np.float32, "wide": np.float64}
_state = {"dtype": np.float32, "grad": True, "check_finite": True}


def default_dtype():
    return _state["dtype"]


def set_default_dtype(precision):
    """Set the dtype used for new tensors: ``"single"`` or ``"wide"``."""
    _state["dtype"] = DTYPES[precision]


@contextlib.contextmanager
def precision(name):
    prev = _state["dtype"]
    _state["dtype"] = DTYPES[name]
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def _check(arr, op):
    if _state["check_finite"] and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(dims={self.dims}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got dims {self.dims}")
        order = _topo(self)
        grads = {id(self): np.ones_like(self.data)}
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
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        # release the tape
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


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


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        return Tensor(x)
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data, parents, backward, op):
    out = Tensor(_check(data, op))
    out._op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    # plain numbers adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, b if isinstance(b, Tensor) else as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


# elementwise

def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), back, "mul")


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def silu(a):
    a = as_tensor(a)
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))

    def back(g):
        return (g * sig * (1.0 + ad * (1.0 - sig)),)

    return _result(ad * sig, (a,), back, "silu")


def gelu(a):
    a = as_tensor(a)
    ad = a.data
    return _result(kernels.gelu_forward(ad), (a,), lambda g: (kernels.gelu_backward(ad, g),), "gelu")


# reductions and layout

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {list(old)} to {list(shape)}") from e
    return _result(data, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat mismatch: {[t.dims for t in tensors]} on axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _result(data, tensors, back, "concat")


def getitem(a, idx):
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _result(np.ascontiguousarray(a.data[idx]), (a,), back, "getitem")


# linear algebra

def matmul(a, b):
    """Matrix product ``a @ b`` with numpy broadcasting over leading dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dims {a.dims} x {b.dims} do not agree")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), back, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; leading dims are flattened for the product."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = w.data
    y = x2 @ wd
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],)) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0) if b.requires_grad else None

    return _result(y.reshape(lead + (wd.shape[1],)), parents, back, "linear")


# fused row kernels

def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for rank {x.ndim}")
    axis = axis % x.ndim
    last = x.ndim - 1
    if axis != last:
        perm = list(range(x.ndim))
        perm[axis], perm[last] = perm[last], perm[axis]
        return transpose(softmax(transpose(x, perm), -1), perm)
    y = kernels.softmax_forward(x.data)
    return _result(y, (x,), lambda g: (kernels.softmax_backward(y, g),), "softmax")


def layer_norm(x, eps=1e-6):
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    y, rstd = kernels.layernorm_forward(x.data, eps)
    return _result(y, (x,), lambda g: (kernels.layernorm_backward(y, rstd, g),), "layer_norm")


def rope(x, cos, sin):
    """Rotate interleaved pairs of the last axis: x is (..., L, 2P), cos/sin are (L, P)."""
    x = as_tensor(x)
    if x.shape[-1] != 2 * cos.shape[-1] or x.shape[-2] != cos.shape[0]:
        raise ShapeError(f"rope table {list(cos.shape)} does not fit input {x.dims}")
    y = kernels.rope_rotate(x.data, cos, sin)
    return _result(y, (x,), lambda g: (kernels.rope_rotate(g, cos, -sin),), "rope")


def mse(pred, target):
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.dims} vs {target.dims}")
    return mean(square(sub(pred, target)))


# gradient checking

@dataclass
class GradReport:
    max_abs_rel_error: float
    worst_index: int
    analytic: float
    numeric: float


def grad_check(f, x, h=1e-5, indices=None, floor=1e-6):
    """Compare reverse-mode gradients of scalar ``f(x)`` with central differences.

    ``x`` is a leaf tensor that ``f`` reads; only the flat ``indices`` are
    perturbed (all entries by default). The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued map, got dims {out.dims}")
    out.backward()
    analytic = np.zeros(x.shape, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = GradReport(0.0, -1, 0.0, 0.0)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).data.item()
            flat[i] = orig - h
            fm = f(x).data.item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst.max_abs_rel_error or worst.worst_index < 0:
                worst = GradReport(err, int(i), ana, num)
    x.grad = None
    return worst
