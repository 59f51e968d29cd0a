"""Reverse-mode autodiff over numpy arrays.

Small by design: exactly the ops the models in this package need, each with
a hand-written backward. Activations are NHWC so normalization acts on the
trailing channel axis. Training runs in float32 by default; gradient
verification re-instantiates models in float64 (see
:mod:`promptpix.autodiff.gradcheck`).
"""

from __future__ import annotations

import contextlib

import numpy as np

from .. import kernels

_GRAD_ENABLED = True


def is_grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-d float array with optional gradient tracking.

    Invariant: ``grad``, when set, has exactly ``data``'s shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # -- structure ---------------------------------------------------------

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
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph -------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
            # The closure and parent refs are one-shot; dropping them frees
            # cached forward buffers as backward proceeds.
            t._backward = None
            t._parents = ()

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, s):
        return power(self, s)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- arithmetic -------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def power(a, s):
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s * np.power(a.data, s - 1.0))

    return _make(np.power(a.data, s), (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (0.5 / out_data))

    return _make(out_data, (a,), backward)


def tanh(a):
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def silu(a):
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (sig + a.data * sig * (1.0 - sig)))

    return _make(out_data, (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward)


# -- shape ------------------------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def reshape(a, shape):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def take(a, idx):
    """Basic (slice/integer) indexing only; advanced indexing would alias."""

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[idx] = g
            a._accumulate(ga)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def pad2d(a, ph, pw):
    """Zero-pad the two spatial axes of an NHWC tensor."""
    if ph == 0 and pw == 0:
        return a

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, ph : g.shape[1] - ph, pw : g.shape[2] - pw, :])

    padded = np.pad(a.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    return _make(padded, (a,), backward)


# -- fused nn ops -----------------------------------------------------------


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate((g - dot) * out_data)

    return _make(out_data, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data
    d = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gxh = g * gamma.data
            t1 = gxh.sum(axis=-1, keepdims=True)
            t2 = (gxh * xhat).sum(axis=-1, keepdims=True)
            x._accumulate((inv / d) * (d * gxh - t1 - xhat * t2))

    return _make(out_data, (x, gamma, beta), backward)


def embedding(weight, idx):
    """Look up rows of `weight` by the integer array `idx`."""
    idx = np.asarray(idx)
    out_data = weight.data[idx]

    def backward(g):
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            kernels.scatter_add_rows(
                gw, idx.ravel().astype(np.int64), np.ascontiguousarray(g.reshape(-1, weight.shape[1]))
            )
            weight._accumulate(gw)

    return _make(out_data, (weight,), backward)


def cross_entropy(logits, labels, ignore_index=-1):
    """Mean token-level CE over positions whose label != ignore_index."""
    labels = np.asarray(labels).reshape(-1)
    flat = logits.data.reshape(-1, logits.shape[-1])
    valid = labels != ignore_index
    nvalid = int(valid.sum())
    if nvalid == 0:
        raise ValueError("cross_entropy: no supervised positions")
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    safe_labels = np.where(valid, labels, 0)
    picked = shifted[np.arange(flat.shape[0]), safe_labels]
    loss = float(((lse - picked) * valid).sum() / nvalid)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted - lse[:, None])
            p[np.arange(flat.shape[0]), safe_labels] -= 1.0
            p *= (valid / nvalid)[:, None] * g
            logits._accumulate(p.reshape(logits.shape))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def conv2d(x, w, b, stride=1, padding=0):
    """2-d convolution, NHWC activations, (kh, kw, cin, cout) weights."""
    kh, kw, cin, cout = w.shape
    xp = pad2d(x, padding, padding)
    n, h, ww_, c = xp.shape
    if c != cin:
        raise ValueError(f"conv2d: expected {cin} input channels, got {c}")
    oh = (h - kh) // stride + 1
    ow = (ww_ - kw) // stride + 1
    cols = np.empty((n, oh, ow, kh * kw * cin), dtype=xp.dtype)
    kernels.im2col(np.ascontiguousarray(xp.data), kh, kw, stride, stride, cols)
    cols2d = cols.reshape(-1, kh * kw * cin)
    w2d = w.data.reshape(kh * kw * cin, cout)
    out_data = (cols2d @ w2d + b.data).reshape(n, oh, ow, cout)

    def backward(g):
        g2d = g.reshape(-1, cout)
        if b.requires_grad:
            b._accumulate(g2d.sum(axis=0))
        if w.requires_grad:
            w._accumulate((cols2d.T @ g2d).reshape(w.shape))
        if xp.requires_grad:
            gcols = (g2d @ w2d.T).reshape(n, oh, ow, kh * kw * cin)
            gx = np.empty_like(xp.data)
            kernels.col2im(np.ascontiguousarray(gcols), kh, kw, stride, stride, gx)
            xp._accumulate(gx)

    return _make(out_data, (xp, w, b), backward)


def upsample2x(x):
    """Nearest-neighbour 2x upsample of an NHWC tensor."""
    out_data = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g):
        if x.requires_grad:
            n, h2, w2, c = g.shape
            x._accumulate(g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)))

    return _make(out_data, (x,), backward)


def l2_normalize(x, axis=-1, eps=1e-12):
    """x / ||x||_2 along `axis`."""
    norm = sqrt(tsum(mul(x, x), axis=axis, keepdims=True) + eps)
    return div(x, norm)
