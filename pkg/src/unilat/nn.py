"""Network building blocks on top of the tensor engine.

Modules register parameters and submodules through attribute assignment,
so parameter names are the attribute paths (e.g. "blocks.0.attn.qkv.weight").
Weight init follows one rule everywhere: truncated normal std 0.02 for
linear/conv weights, zeros for biases; final projections that must start
silent (velocity heads, occupancy logits, modulation) are zero-initialized
explicitly by their owners.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


def child_seed(seed, *keys):
    """Stable derived seed for independent RNG streams."""
    import hashlib

    tag = f"{seed}/" + "/".join(str(k) for k in keys)
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


def trunc_normal(shape, std, rng, bound=2.0):
    """Normal(0, std) resampled until within +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    lim = bound * std
    bad = np.abs(out) > lim
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > lim
    return out


class Parameter(Tensor):
    """A trainable tensor; requires_grad is always on at creation."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal container with ordered parameter discovery."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=path + ".")
            elif isinstance(value, ModuleList):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(prefix=f"{path}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}"
                )
            p.data = arr.copy()
            p.grad = None

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(list):
    """A list of modules that named_parameters knows how to walk."""


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, zero_init=False):
        if zero_init:
            w = np.zeros((in_features, out_features))
        else:
            w = trunc_normal((in_features, out_features), 0.02, rng)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x):
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim, affine=True, eps=1e-6):
        self.eps = eps
        self.weight = Parameter(np.ones(dim)) if affine else None
        self.bias = Parameter(np.zeros(dim)) if affine else None

    def __call__(self, x):
        return T.layer_norm(x, self.weight, self.bias, eps=self.eps)


class GroupNorm(Module):
    """Group normalization over (group-channels, spatial) per sample; input (B,C,D,H,W)."""

    def __init__(self, channels, groups=None, eps=1e-6):
        self.groups = min(groups or 8, channels)
        if channels % self.groups != 0:
            self.groups = 1
        self.channels = channels
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def __call__(self, x):
        b, c = x.shape[0], x.shape[1]
        sp = x.shape[2:]
        g = self.groups
        xg = T.reshape(x, (b, g, -1))
        mu = T.mean(xg, axis=2, keepdims=True)
        xc = xg - mu
        var = T.mean(xc * xc, axis=2, keepdims=True)
        y = xc / T.sqrt(var + self.eps)
        y = T.reshape(y, (b, c) + sp)
        shape = (1, c) + (1,) * len(sp)
        return y * T.reshape(self.weight, shape) + T.reshape(self.bias, shape)


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True, zero_init=False):
        k = kernel if isinstance(kernel, tuple) else (kernel,) * 3
        if zero_init:
            w = np.zeros((out_ch, in_ch) + k)
        else:
            w = trunc_normal((out_ch, in_ch) + k, 0.02, rng)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        out = T.conv3d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + T.reshape(self.bias, (1, -1, 1, 1, 1))
        return out


class ConvTranspose3d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        k = kernel if isinstance(kernel, tuple) else (kernel,) * 3
        self.weight = Parameter(trunc_normal((in_ch, out_ch) + k, 0.02, rng))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        out = T.conv_transpose3d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + T.reshape(self.bias, (1, -1, 1, 1, 1))
        return out


def attention(q, k, v, num_heads):
    """Scaled dot-product multi-head attention on (L, C) token matrices."""
    lq, c = q.shape
    lk = k.shape[0]
    if c % num_heads != 0:
        raise ValueError(f"embedding dim {c} not divisible by {num_heads} heads")
    if k.shape != v.shape:
        raise ValueError(f"k and v must share shape, got {k.shape} and {v.shape}")
    dh = c // num_heads
    qh = T.transpose(T.reshape(q, (lq, num_heads, dh)), (1, 0, 2))
    kh = T.transpose(T.reshape(k, (lk, num_heads, dh)), (1, 0, 2))
    vh = T.transpose(T.reshape(v, (lk, num_heads, dh)), (1, 0, 2))
    scores = (qh @ T.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    out = weights @ vh
    return T.reshape(T.transpose(out, (1, 0, 2)), (lq, c))


class MultiHeadAttention(Module):
    """Projected self- or cross-attention over token matrices."""

    def __init__(self, dim, num_heads, rng, kv_dim=None):
        kv_dim = kv_dim or dim
        self.num_heads = num_heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(kv_dim, dim, rng)
        self.v_proj = Linear(kv_dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def __call__(self, x, context=None):
        ctx = x if context is None else context
        out = attention(self.q_proj(x), self.k_proj(ctx), self.v_proj(ctx), self.num_heads)
        return self.out_proj(out)


class Mlp(Module):
    def __init__(self, dim, rng, ratio=4):
        hidden = dim * ratio
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class AdaLayerNorm(Module):
    """Conditioned modulation: gate * (scale * LN(x) + shift).

    The projection is zero-initialized so scale starts at 1 (1 + raw), shift
    and gate start at 0; a gated sublayer therefore contributes nothing at
    init while still receiving gradient through the gate.
    """

    def __init__(self, dim, cond_dim, rng):
        self.norm = LayerNorm(dim, affine=False)
        self.proj = Linear(cond_dim, 3 * dim, rng, zero_init=True)
        self.dim = dim

    def coefficients(self, cond):
        raw = self.proj(cond)
        d = self.dim
        scale = raw[..., 0:d] + 1.0
        shift = raw[..., d : 2 * d]
        gate = raw[..., 2 * d : 3 * d]
        return scale, shift, gate

    def modulate(self, x, cond):
        scale, shift, _ = self.coefficients(cond)
        return self.norm(x) * scale + shift

    def __call__(self, x, cond):
        scale, shift, gate = self.coefficients(cond)
        return gate * (self.norm(x) * scale + shift)


def adaln_modulate(x, cond, adaln: AdaLayerNorm):
    """The bare modulation op; see AdaLayerNorm for the sublayer wiring."""
    return adaln(x, cond)


class AxisPositionEmbedding(Module):
    """Learned 3D position embedding factored per axis (sum of three tables)."""

    def __init__(self, resolution, dim, rng):
        self.tables = ModuleList(
            [_EmbeddingTable(resolution, dim, rng) for _ in range(3)]
        )

    def __call__(self, coords):
        out = self.tables[0].lookup(coords[:, 0])
        out = out + self.tables[1].lookup(coords[:, 1])
        out = out + self.tables[2].lookup(coords[:, 2])
        return out


class _EmbeddingTable(Module):
    def __init__(self, rows, dim, rng):
        self.table = Parameter(trunc_normal((rows, dim), 0.02, rng))

    def lookup(self, idx):
        return T.take_rows(self.table, np.asarray(idx))


class SparseTransformerBlock(Module):
    """Pre-LN transformer block over occupied-voxel tokens.

    Attention is windowed: tokens are grouped by voxel coordinate block of
    `window` cells per axis, with full attention whenever the whole token
    set fits in one window volume.
    """

    def __init__(self, dim, num_heads, window, rng, mlp_ratio=4):
        self.window = window
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, rng, ratio=mlp_ratio)

    def __call__(self, x, coords):
        x = x + self._windowed(self.norm1(x), coords)
        x = x + self.mlp(self.norm2(x))
        return x

    def _windowed(self, h, coords):
        n = h.shape[0]
        if n <= self.window**3:
            return self.attn(h)
        cell = coords // self.window
        keys = (cell[:, 0] * (2**20) + cell[:, 1] * (2**10) + cell[:, 2]).astype(np.int64)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        boundaries = np.nonzero(np.diff(sorted_keys))[0] + 1
        groups = np.split(order, boundaries)
        pieces = []
        index = []
        for idx in groups:
            pieces.append(self.attn(T.take_rows(h, idx)))
            index.append(idx)
        flat = T.concat(pieces, axis=0)
        return T.index_add_rows(n, np.concatenate(index), flat)


def sinusoidal_embedding(t, dim):
    """Classic sin/cos timestep features for a scalar t (returns (dim,) array)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])
