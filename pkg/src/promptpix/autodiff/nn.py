"""Layer library on top of the autodiff core: parameter registry, linear /
conv / norm / attention blocks, and state-dict plumbing shared by every
trainable model in the package.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import core
from .core import Tensor


class Module:
    """Parameter container. Submodules and parameters are discovered from
    instance attributes, so models just assign them in __init__.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def n_params(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        mine = dict(self.named_parameters())
        if set(mine) != set(state):
            missing = sorted(set(mine) - set(state))
            extra = sorted(set(state) - set(mine))
            raise ValueError(f"state mismatch: missing={missing}, unexpected={extra}")
        for name, p in mine.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype)

    def param_hash(self):
        """Content hash of all parameters; used to verify freezing contracts."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def param(rng, shape, scale, dtype=np.float32):
    return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype=np.float32):
        self.w = param(rng, (d_in, d_out), (1.0 / d_in) ** 0.5, dtype)
        self.b = zeros_param((d_out,), dtype)

    def __call__(self, x):
        return core.matmul(x, self.w) + self.b


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        self.gamma = ones_param((dim,), dtype)
        self.beta = zeros_param((dim,), dtype)

    def __call__(self, x):
        return core.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, rng, n, dim, dtype=np.float32):
        self.w = param(rng, (n, dim), 0.02, dtype)

    def __call__(self, idx):
        return core.embedding(self.w, idx)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, padding=None, dtype=np.float32):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.w = param(rng, (k, k, c_in, c_out), (1.0 / (k * k * c_in)) ** 0.5, dtype)
        self.b = zeros_param((c_out,), dtype)

    def __call__(self, x):
        return core.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class SelfAttention(Module):
    """Multi-head self-attention over (B, S, D), optionally causal."""

    def __init__(self, rng, dim, heads, causal=False, dtype=np.float32):
        if dim % heads:
            raise ValueError("dim must divide evenly into heads")
        self.heads = heads
        self.dim = dim
        self.causal = causal
        self.qkv = Linear(rng, dim, 3 * dim, dtype)
        self.out = Linear(rng, dim, dim, dtype)

    def __call__(self, x, key_mask=None):
        b, s, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(x)  # (B, S, 3D)
        qkv = core.reshape(qkv, (b, s, 3, self.heads, hd))
        qkv = core.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, S, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = core.matmul(q, core.transpose(k, (0, 1, 3, 2))) * (1.0 / hd**0.5)
        if self.causal:
            neg = np.triu(np.full((s, s), -1e9, dtype=x.dtype), k=1)
            att = att + Tensor(neg)
        if key_mask is not None:
            # key_mask: (B, S) with 1 = attend, 0 = hide padded key positions
            bias = np.where(np.asarray(key_mask, dtype=x.dtype) > 0, 0.0, -1e9)
            att = att + Tensor(bias[:, None, None, :].astype(x.dtype))
        att = core.softmax(att, axis=-1)
        o = core.matmul(att, v)  # (B, H, S, hd)
        o = core.reshape(core.transpose(o, (0, 2, 1, 3)), (b, s, d))
        return self.out(o)


class CrossAttention(Module):
    """Queries from (B, S, D); keys/values from a context (B, T, Dc).

    `ctx_mask` (B, T) zeros out padded context tokens.
    """

    def __init__(self, rng, dim, ctx_dim, heads, dtype=np.float32):
        self.heads = heads
        self.q = Linear(rng, dim, dim, dtype)
        self.k = Linear(rng, ctx_dim, dim, dtype)
        self.v = Linear(rng, ctx_dim, dim, dtype)
        self.out = Linear(rng, dim, dim, dtype)

    def __call__(self, x, ctx, ctx_mask=None):
        b, s, d = x.shape
        t = ctx.shape[1]
        hd = d // self.heads
        q = core.transpose(core.reshape(self.q(x), (b, s, self.heads, hd)), (0, 2, 1, 3))
        k = core.transpose(core.reshape(self.k(ctx), (b, t, self.heads, hd)), (0, 2, 1, 3))
        v = core.transpose(core.reshape(self.v(ctx), (b, t, self.heads, hd)), (0, 2, 1, 3))
        att = core.matmul(q, core.transpose(k, (0, 1, 3, 2))) * (1.0 / hd**0.5)
        if ctx_mask is not None:
            bias = np.where(ctx_mask[:, None, None, :] > 0, 0.0, -1e9).astype(x.dtype)
            att = att + Tensor(bias)
        att = core.softmax(att, axis=-1)
        o = core.matmul(att, v)
        o = core.reshape(core.transpose(o, (0, 2, 1, 3)), (b, s, d))
        return self.out(o)


class Mlp(Module):
    def __init__(self, rng, dim, hidden, dtype=np.float32):
        self.fc1 = Linear(rng, dim, hidden, dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype)

    def __call__(self, x):
        return self.fc2(core.silu(self.fc1(x)))


class TransformerBlock(Module):
    def __init__(self, rng, dim, heads, causal=False, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = SelfAttention(rng, dim, heads, causal=causal, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(rng, dim, 4 * dim, dtype)

    def __call__(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask=key_mask)
        return x + self.mlp(self.ln2(x))


def sinusoid_table(n_pos, dim, dtype=np.float32):
    """Fixed sin/cos position table; extrapolates to unseen positions."""
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((n_pos, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)


def pack_params(params):
    """Flatten a list of parameter tensors into one float64 vector."""
    return np.concatenate([p.data.astype(np.float64).ravel() for p in params])


def unpack_params(vec, params):
    """Write a flat vector back into the parameter tensors (in place)."""
    off = 0
    for p in params:
        n = p.size
        p.data = vec[off : off + n].reshape(p.shape).astype(p.dtype)
        off += n
    if off != vec.size:
        raise ValueError("parameter vector length mismatch")
