"""Float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
Nodes carry a monotonically increasing creation id, so a backward sweep in
descending id order is a valid reverse topological order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def note_branch(arr):
    """Record a piecewise decision (ReLU mask, argmax) when branch recording is on."""
    rec = getattr(_state, "branches", None)
    if rec is not None:
        rec.append(arr)


@contextmanager
def record_branches():
    """Collect every ReLU mask / argmax taken inside the block, in order."""
    prev = getattr(_state, "branches", None)
    _state.branches = []
    try:
        yield _state.branches
    finally:
        _state.branches = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self.op = "leaf"

    # -- introspection -------------------------------------------------
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
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of ``op``; record the node only if a parent needs grad."""
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scalar_mul(a, c):
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def relu(a):
    mask = a.data > 0  # subgradient 0 at exactly 0
    note_branch(mask)
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    s = _sigmoid(a.data)
    return make_node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a):
    e = np.exp(a.data)
    return make_node(e, (a,), lambda g: (g * e,), "exp")


def log(a):
    x = a.data
    return make_node(np.log(x), (a,), lambda g: (g / x,), "log")


def square(a):
    x = a.data
    return make_node(x * x, (a,), lambda g: (2.0 * g * x,), "square")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "scalar-mul": scalar_mul,
    "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log,
}


def elementwise(kind, a, b=None):
    """Dispatch by op name; ``b`` is the second tensor or, for scalar-mul, the scalar."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    if kind in ("add", "sub", "mul", "scalar-mul"):
        return fn(a, b)
    return fn(a)


# -- reductions and structure ------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scalar_mul(sum_(a, axis=axes, keepdims=keepdims), 1.0 / n)


def amax(a, axis, keepdims=False):
    """Max over ``axis``; the gradient goes to the first maximal element in row-major order."""
    axes = _norm_axes(axis, a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    arg = flat.argmax(axis=-1)
    note_branch(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_shape = out.shape
    if keepdims:
        out = np.expand_dims(out, axes)
    shape = a.shape

    def bw(g):
        g = g.reshape(out_shape)
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))).reshape(shape),)

    return make_node(out, (a,), bw, "amax")


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def take(a, idx):
    shape = a.shape
    basic = _is_basic(idx)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_node(a.data[idx], (a,), bw, "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tensors, bw, "concat")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# -- graph and backward ------------------------------------------------

class Graph:
    """Nodes reachable from an output, in creation order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, output):
        seen = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        return cls(sorted(seen.values(), key=lambda t: t._id))

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        return [t for t in self.nodes if t.is_leaf]


def backward(loss, graph=None):
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``.

    Leaf gradients accumulate across calls (sum), which is what micro-batched
    training relies on; clear them with ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    graph = graph or Graph.trace(loss)
    grads = {loss._id: np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    return graph


def finite_diff_grad(f, x, eps=1e-5, indices=None, skip_kinks=False):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is a Tensor whose data is perturbed in place (and restored).
    ``indices`` optionally limits the probe to a list of flat indices.
    With ``skip_kinks`` a probe whose +eps and -eps evaluations take
    different ReLU / max branches is dropped, since the difference quotient
    straddles a kink there. Unprobed or dropped entries are NaN.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            with record_branches() as bp:
                fp = _scalar(f(x))
            flat[i] = orig - eps
            with record_branches() as bm:
                fm = _scalar(f(x))
            flat[i] = orig
            if skip_kinks and not _same_branches(bp, bm):
                continue
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def _scalar(v):
    return float(np.asarray(_value(v)).reshape(-1)[0])


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def _value(v):
    return v.data if isinstance(v, Tensor) else v


def relative_error(analytic, numeric, floor=1e-5):
    """Max elementwise |a - n| / max(|a|, |n|, floor); NaN entries of ``numeric`` are ignored.

    Central differences at eps=1e-5 carry ~1e-10 absolute roundoff, so
    entries smaller than ``floor`` are effectively compared absolutely.
    """
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
