"""Reverse-mode autodiff on float64 numpy arrays.

Define-by-run tape: each op records its parents and a closure that routes
the output gradient back to them.  Everything is 64-bit and deterministic
for a fixed iteration order; there is no graph compilation and no
parallelism inside the engine itself.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus an optional gradient and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, grad):
        grad = _unbroadcast(_as_array(grad), self.data.shape)
        if self.grad is None:
            # always copy: the incoming array may be shared with another node
            self.grad = np.array(grad)
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this tensor (scalar unless `grad` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        # iterative topo sort: recursion depth is unbounded on training graphs
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method sugar ---------------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Build an op result; records the tape node only when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _binary(a, b):
    return as_tensor(a), as_tensor(b)


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward)


def pow_const(a, p):
    a = as_tensor(a)
    p = float(p)

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def gelu(a):
    """Exact GELU: x * Phi(x)."""
    a = as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        a._accumulate(g * (phi + a.data * pdf))

    return _make(a.data * phi, (a,), backward)


def abs_(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def clip(a, lo, hi):
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        a._accumulate(g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    in_shape = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(in_shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def getitem(a, key):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return _make(a.data[key], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def pad(a, pad_width):
    """Zero padding; pad_width follows np.pad conventions."""
    a = as_tensor(a)
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.data.shape))

    def backward(g):
        a._accumulate(g[slices])

    return _make(np.pad(a.data, pad_width), (a,), backward)


# -- reductions ---------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    in_shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, in_shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    in_shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([in_shape[i] for i in ax]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, in_shape) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a, b = _binary(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs rank >= 2 operands, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _make(out_data, (a,), backward)


def layer_norm(x, weight=None, bias=None, eps=1e-6):
    """Normalize over the last axis, optional affine."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = x.data.shape[-1]
    parents = [x]
    if weight is not None:
        weight = as_tensor(weight)
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
    out_data = y if weight is None else y * weight.data
    if bias is not None:
        out_data = out_data + bias.data

    def backward(g):
        gy = g if weight is None else g * weight.data
        if x.requires_grad:
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * y).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gy - m1 - y * m2))
        if weight is not None and weight.requires_grad:
            weight._accumulate(_unbroadcast(g * y, weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))

    return _make(out_data, parents, backward)


# -- gather / scatter -----------------------------------------------------------


def take_rows(a, idx):
    """Rows of a 2D tensor: out[i] = a[idx[i]]; idx may be any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, a.data.shape[-1]))
        a._accumulate(full)

    return _make(a.data[idx], (a,), backward)


def take(a, idx):
    """Flat gather: out = a.reshape(-1)[idx], output has idx's shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)

    def backward(g):
        full = np.zeros(a.data.size)
        np.add.at(full, idx.reshape(-1), g.reshape(-1))
        a._accumulate(full.reshape(a.data.shape))

    return _make(a.data.reshape(-1)[idx], (a,), backward)


def index_add_rows(num_rows, idx, values):
    """Scatter-add rows into a fresh (num_rows, C) tensor."""
    values = as_tensor(values)
    idx = np.asarray(idx).reshape(-1)
    out_data = np.zeros((num_rows, values.data.shape[-1]))
    np.add.at(out_data, idx, values.data.reshape(len(idx), -1))

    def backward(g):
        values._accumulate(g[idx].reshape(values.data.shape))

    return _make(out_data, (values,), backward)


# -- convolution -----------------------------------------------------------------


def _triple(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v),) * 3


def _pad5(x, p):
    if max(p) == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def _corr3d(x, w, stride):
    """Valid correlation of x (B,C,D,H,W) with w (O,C,kd,kh,kw)."""
    win = sliding_window_view(x, w.shape[2:], axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    return np.einsum("bcdhwijk,ocijk->bodhw", win, w, optimize=True)


def _corr3d_wgrad(x, g, k, stride):
    """Weight gradient: correlate input windows with the output gradient."""
    win = sliding_window_view(x, k, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    return np.einsum("bodhw,bcdhwijk->ocijk", g, win, optimize=True)


def _dilate(g, stride, extra):
    """Insert stride-1 zeros between entries, then extra zeros on the right."""
    if max(stride) == 1 and max(extra) == 0:
        return g
    b, c, d, h, w = g.shape
    out = np.zeros(
        (
            b,
            c,
            (d - 1) * stride[0] + 1 + extra[0],
            (h - 1) * stride[1] + 1 + extra[1],
            (w - 1) * stride[2] + 1 + extra[2],
        )
    )
    out[:, :, :: stride[0], :: stride[1], :: stride[2]][:, :, :d, :h, :w] = g
    return out


def conv3d(x, w, stride=1, padding=0):
    """3D correlation; x (B,C,D,H,W), w (O,C,kd,kh,kw)."""
    x, w = _binary(x, w)
    stride, padding = _triple(stride), _triple(padding)
    if min(stride) < 1:
        raise ValueError(f"conv3d stride must be positive, got {stride}")
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError(
            f"conv3d needs rank-5 input and weight, got {x.data.shape} and {w.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.data.shape[1]}, weight expects {w.data.shape[1]}"
        )
    k = w.data.shape[2:]
    in_sp = x.data.shape[2:]
    out_sp = tuple((in_sp[i] + 2 * padding[i] - k[i]) // stride[i] + 1 for i in range(3))
    if min(out_sp) < 1:
        raise ValueError(
            f"conv3d output would be empty: input {x.data.shape}, kernel {k}, stride {stride}, padding {padding}"
        )
    xp = _pad5(x.data, padding)
    out_data = _corr3d(xp, w.data, stride)

    def backward(g):
        if w.requires_grad:
            w._accumulate(_corr3d_wgrad(xp, g, k, stride))
        if x.requires_grad:
            wt = np.flip(w.data, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4).copy()
            extra = tuple(
                in_sp[i] + 2 * padding[i] - ((out_sp[i] - 1) * stride[i] + k[i]) for i in range(3)
            )
            gd = _dilate(g, stride, extra)
            gp = _pad5(gd, tuple(ki - 1 for ki in k))
            dx = _corr3d(gp, wt, (1, 1, 1))
            if max(padding) > 0:
                dx = dx[
                    :,
                    :,
                    padding[0] : padding[0] + in_sp[0],
                    padding[1] : padding[1] + in_sp[1],
                    padding[2] : padding[2] + in_sp[2],
                ]
            x._accumulate(dx)

    return _make(out_data, (x, w), backward)


def conv_transpose3d(x, w, stride=1, padding=0):
    """Transposed 3D convolution; x (B,C,D,H,W), w (C,O,kd,kh,kw)."""
    x, w = _binary(x, w)
    stride, padding = _triple(stride), _triple(padding)
    if min(stride) < 1:
        raise ValueError(f"conv_transpose3d stride must be positive, got {stride}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"conv_transpose3d channel mismatch: input has {x.data.shape[1]}, weight expects {w.data.shape[0]}"
        )
    k = w.data.shape[2:]
    if any(padding[i] > k[i] - 1 for i in range(3)):
        raise ValueError(f"conv_transpose3d padding {padding} exceeds kernel {k} minus one")
    in_sp = x.data.shape[2:]
    out_sp = tuple((in_sp[i] - 1) * stride[i] + k[i] - 2 * padding[i] for i in range(3))
    wt = np.flip(w.data, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4).copy()
    xd = _dilate(x.data, stride, (0, 0, 0))
    xp = _pad5(xd, tuple(k[i] - 1 - padding[i] for i in range(3)))
    out_data = _corr3d(xp, wt, (1, 1, 1))

    def backward(g):
        gp = _pad5(g, padding)
        if x.requires_grad:
            x._accumulate(_corr3d(gp, w.data, stride))
        if w.requires_grad:
            win = sliding_window_view(gp, k, axis=(2, 3, 4))
            win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
            w._accumulate(np.einsum("bodhwijk,bcdhw->coijk", win, x.data, optimize=True))

    out = _make(out_data, (x, w), backward)
    assert out.data.shape[2:] == out_sp
    return out
