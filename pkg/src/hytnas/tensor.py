"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, every
operation records its parents and a closure that routes the incoming
gradient to them, and ``backward`` replays those closures in reverse
topological order.  Gradients accumulate (sum) across repeated uses of
the same tensor; callers zero them between optimizer steps.

Precision is a process-wide mode: float64 for oracle/test work where
finite differences need headroom, float32 for training runs.  Switch it
with :func:`set_default_dtype` before building a network.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_DEBUG_CHECKS = False

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}


def set_default_dtype(dtype):
    """Set the scalar type new tensors are created with ("f32" or "f64")."""
    global _DEFAULT_DTYPE
    if isinstance(dtype, str):
        if dtype not in _DTYPE_NAMES:
            raise ValueError(f"unknown dtype {dtype!r}, expected 'f32' or 'f64'")
        dtype = _DTYPE_NAMES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (mainly for tests)."""
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


def set_debug_checks(enabled: bool):
    """Enable per-operation NaN/Inf assertions (slow, for debugging)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = ()

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flags})"

    # -- graph construction --------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from this scalar through the recorded graph.

        The graph is consumed: parent links and closures are dropped so
        the forward buffers they capture can be freed.
        """
        _run_backward(self)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return _add(self, other)
        return _node(self.data + other, (self,), _copy_back(self))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, other)
        c = other

        def back(out):
            _acc(self, _unbroadcast(out.grad * c, self.data.shape))

        return _node(self.data * c, (self,), back)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return self * (1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        """Basic (slice/int) indexing; gradient scatters back to the source."""
        out_data = self.data[idx]
        src_shape = self.data.shape
        src_dtype = self.data.dtype

        def back(out):
            g = np.zeros(src_shape, dtype=src_dtype)
            g[idx] = out.grad
            _acc(self, g)

        return _node(out_data, (self,), back)

    # -- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def back(out):
            _acc(self, out.grad.reshape(old))

        return _node(self.data.reshape(shape), (self,), back)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def back(out):
            _acc(self, out.grad.transpose(inv))

        return _node(self.data.transpose(axes), (self,), back)

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        in_shape = self.data.shape

        def back(out):
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(self, np.broadcast_to(g, in_shape))

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


class Parameter(Tensor):
    """Learnable tensor with a hierarchical name and an optimizer group.

    ``group`` is either "weight" (kernels, norm affine terms, biases) or
    "arch" (architecture logits); the two groups are optimized by
    different optimizers and never share weight decay.
    """

    __slots__ = ("name", "group")

    def __init__(self, data, name="", group="weight", dtype=None):
        if group not in ("weight", "arch"):
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.group = group

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.data.shape}, group={self.group})"


# ---------------------------------------------------------------------------
# node construction and the backward engine


def _node(data, parents, backward):
    """Create a graph node. Falls back to a constant when grads are off."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an operation")
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(data, dtype=data.dtype)
    out = Tensor(data, dtype=data.dtype)
    out.requires_grad = True
    out._prev = tuple(parents)
    out._backward = backward
    return out


def _acc(t, g):
    # never accumulate in place: the first stored gradient may be a view
    t.grad = g if t.grad is None else t.grad + g


def _copy_back(src):
    def back(out):
        _acc(src, out.grad)

    return back


def _unbroadcast(grad, shape):
    """Sum a gradient over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _add(a, b):
    def back(out):
        if a.requires_grad or a._prev:
            _acc(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad or b._prev:
            _acc(b, _unbroadcast(out.grad, b.data.shape))

    return _node(a.data + b.data, (a, b), back)


def _mul(a, b):
    def back(out):
        if a.requires_grad or a._prev:
            _acc(a, _unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad or b._prev:
            _acc(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), back)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _run_backward(root):
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {root.data.shape}")
    order = _toposort(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
            # intermediate grads are only needed to keep propagating
            if not isinstance(node, Parameter):
                node.grad = None if node is not root else node.grad
    for node in order:
        node._prev = ()
        node._backward = None
    return order


def backward(loss):
    """Run backprop from a scalar loss and collect parameter gradients.

    Returns a mapping ``name -> gradient array`` covering every Parameter
    that participated in the forward computation. The graph is consumed.
    A loss with no recorded graph yields an empty map and a warning.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss._prev and loss._backward is None:
        logger.warning("backward called on a detached loss; no gradients to compute")
        return {}
    order = _run_backward(loss)
    grads = {}
    for node in order:
        if isinstance(node, Parameter) and node.grad is not None:
            if node.name in grads and grads[node.name] is not node.grad:
                raise ValueError(f"duplicate parameter name in graph: {node.name!r}")
            grads[node.name] = node.grad
    return grads


# ---------------------------------------------------------------------------
# free functions used across the package


def concat(tensors, axis):
    """Concatenate along ``axis``; the gradient splits back by extent."""
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def back(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._prev:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                _acc(t, out.grad[tuple(idx)])

    return _node(np.concatenate(datas, axis=axis), tuple(tensors), back)


def matmul(a, b):
    """Batched matrix product over trailing two axes.

    Leading (batch) axes must match exactly or be absent on one side in
    the plain 2D case; broadcasting of batch axes is not supported.
    """
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")

    def back(out):
        g = out.grad
        if a.requires_grad or a._prev:
            ga = g @ np.swapaxes(bd, -1, -2)
            _acc(a, _unbroadcast(ga, ad.shape))
        if b.requires_grad or b._prev:
            gb = np.swapaxes(ad, -1, -2) @ g
            _acc(b, _unbroadcast(gb, bd.shape))

    return _node(ad @ bd, (a, b), back)


def softmax(x, axis):
    """Max-stabilized softmax along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(out):
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(x, y * (g - dot))

    return _node(y, (x,), back)


def log_softmax(x, axis):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def back(out):
        g = out.grad
        _acc(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _node(y, (x,), back)


def leaky_relu(x, slope=0.01):
    mask = x.data >= 0

    def back(out):
        _acc(x, out.grad * np.where(mask, 1.0, slope))

    return _node(np.where(mask, x.data, slope * x.data), (x,), back)


def hardswish(x):
    """x * clamp(x + 3, 0, 6) / 6."""
    inner = np.clip(x.data + 3.0, 0.0, 6.0)
    y = x.data * inner / 6.0

    def back(out):
        d = np.where(x.data <= -3.0, 0.0, np.where(x.data >= 3.0, 1.0, (2.0 * x.data + 3.0) / 6.0))
        _acc(x, out.grad * d)

    return _node(y, (x,), back)


def gather_bias(table, index):
    """Look biases up from a per-head table: out[h, i, j] = flat(table)[h, index[i, j]].

    ``table`` has shape (heads, R, S); ``index`` holds flat positions into
    the trailing R*S axes. The gradient scatter-adds into the table.
    """
    h = table.data.shape[0]
    flat = table.data.reshape(h, -1)
    out_data = flat[:, index]

    def back(out):
        g = np.zeros_like(flat)
        np.add.at(g, (slice(None), index), out.grad)
        _acc(table, g.reshape(table.data.shape))

    return _node(out_data, (table,), back)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(fn, inputs, eps=1e-4):
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps the given tensors to a scalar Tensor and must be safe to
    re-evaluate (it is called twice per input element). Inputs are marked
    requires_grad in place. Returns the worst relative error, defined as
    |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            with no_grad():
                f_plus = float(fn(*inputs).data)
            flat[i] = saved - eps
            with no_grad():
                f_minus = float(fn(*inputs).data)
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ai = a.reshape(-1)[i]
            denom = max(abs(ai), abs(numeric), 1.0)
            worst = max(worst, abs(ai - numeric) / denom)
    return worst
