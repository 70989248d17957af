"""Trainable layers with explicit local backward rules.

No tape: every layer caches what its own backward needs during a training
forward pass and exposes backward(dy) -> dx, accumulating parameter
gradients in place. Layers are dtype-generic (float32 in production;
gradient-check harnesses may cast a model to float64).
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ShapeError
from .kernel import Rng, count_qk_dots


class Param:
    """A named trainable array with an accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None


def glorot(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Glorot-uniform init."""
    shape = shape if shape is not None else (fan_in, fan_out)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    u = rng.uniform((1, n)).reshape(shape)
    return ((u * 2.0 - 1.0) * limit).astype(np.float32)


class Layer:
    """Base: parameter discovery by attribute walk."""

    def named_params(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Param):
                yield (f"{prefix}{name}", value)
            elif isinstance(value, Layer):
                yield from value.named_params(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_params(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Param):
                        yield (f"{prefix}{name}.{i}", item)

    def cast(self, dtype) -> None:
        for _, p in self.named_params():
            p.data = p.data.astype(dtype)
            p.grad = None


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out), np.float32) if zero else glorot(rng, d_in, d_out)
        self.w = Param(w)
        self.b = Param(np.zeros(d_out, np.float32)) if bias else None
        self._x = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[-1] != self.w.data.shape[0]:
            raise ShapeError(f"linear: input {x.shape} vs weight {self.w.data.shape}")
        if train:
            self._x = x
        y = x @ self.w.data
        if self.b is not None:
            y = y + self.b.data
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        self._x = None
        xf = x.reshape(-1, x.shape[-1])
        dyf = dy.reshape(-1, dy.shape[-1])
        self.w.add_grad(xf.T @ dyf)
        if self.b is not None:
            self.b.add_grad(dyf.sum(axis=0))
        return dy @ self.w.data.T


class Embedding(Layer):
    def __init__(self, vocab: int, dim: int, rng: Rng, scale: float = 0.05):
        self.table = Param((rng.normal((vocab, dim)) * scale).astype(np.float32))
        self._ids = None

    def forward(self, ids: np.ndarray, train: bool = False) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if train:
            self._ids = ids
        return self.table.data[ids]

    def backward(self, dy: np.ndarray) -> None:
        g = np.zeros_like(self.table.data)
        np.add.at(g, self._ids, dy)
        self._ids = None
        self.table.add_grad(g)


class SiLU(Layer):
    def __init__(self):
        self._s = None
        self._x = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        s = 1.0 / (1.0 + np.exp(-x))
        if train:
            self._s, self._x = s, x
        return x * s

    def backward(self, dy: np.ndarray) -> np.ndarray:
        s, x = self._s, self._x
        self._s = self._x = None
        return dy * (s * (1.0 + x * (1.0 - s)))


class LayerNorm(Layer):
    """Normalization over one axis with affine parameters.

    axis=-1 normalizes tokens [.., T, C]; axis=1 normalizes conv maps
    [B, C, H, W] per spatial position (channel layer norm).
    """

    def __init__(self, dim: int, axis: int = -1, eps: float = 1e-5):
        self.g = Param(np.ones(dim, np.float32))
        self.b = Param(np.zeros(dim, np.float32))
        self.axis = axis
        self.eps = eps
        self._cache = None

    def _pshape(self, ndim: int):
        shape = [1] * ndim
        shape[self.axis] = -1
        return shape

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        ax = self.axis
        mu = x.mean(axis=ax, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=ax, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        ps = self._pshape(x.ndim)
        if train:
            self._cache = (xhat, inv)
        return xhat * self.g.data.reshape(ps) + self.b.data.reshape(ps)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        self._cache = None
        ax = self.axis
        ps = self._pshape(dy.ndim)
        reduce_axes = tuple(i for i in range(dy.ndim) if i != (ax % dy.ndim))
        self.g.add_grad((dy * xhat).sum(axis=reduce_axes))
        self.b.add_grad(dy.sum(axis=reduce_axes))
        dxhat = dy * self.g.data.reshape(ps)
        n = xhat.shape[ax]
        # d/dx of (x - mu) * inv with mu, inv functions of x along `ax`
        return inv * (
            dxhat
            - dxhat.mean(axis=ax, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True)
        )


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return cols.reshape(b, c * k * k, oh * ow), (oh, ow, xp.shape)


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int, oh: int, ow: int, xp_shape):
    b, c, h, w = x_shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dc = dcols.reshape(b, c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dc[:, :, ki, kj]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


class Conv2d(Layer):
    """k x k convolution via im2col, stride 1 or 2, same-style padding."""

    def __init__(self, c_in: int, c_out: int, rng: Rng, k: int = 3, stride: int = 1,
                 pad: int = 1, zero: bool = False):
        fan_in = c_in * k * k
        w = np.zeros((c_out, fan_in), np.float32) if zero else glorot(rng, fan_in, c_out, (c_out, fan_in))
        self.w = Param(w)
        self.b = Param(np.zeros(c_out, np.float32))
        self.k, self.stride, self.pad, self.c_in = k, stride, pad, c_in
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv: input {x.shape}, expected [B, {self.c_in}, H, W]")
        cols, (oh, ow, xp_shape) = _im2col(x, self.k, self.stride, self.pad)
        y = np.matmul(self.w.data, cols) + self.b.data[None, :, None]
        if train:
            self._cache = (cols, x.shape, oh, ow, xp_shape)
        return y.reshape(x.shape[0], -1, oh, ow)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        cols, x_shape, oh, ow, xp_shape = self._cache
        self._cache = None
        b = dy.shape[0]
        dyf = dy.reshape(b, dy.shape[1], oh * ow)
        self.w.add_grad(np.einsum("bol,bil->oi", dyf, cols, optimize=True))
        self.b.add_grad(dyf.sum(axis=(0, 2)))
        dcols = np.matmul(self.w.data.T, dyf)
        return _col2im(dcols, x_shape, self.k, self.stride, self.pad, oh, ow, xp_shape)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour x2 upsampling of [B, C, H, W]."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    b, c, h2, w2 = dy.shape
    return dy.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, train: bool = False):
    """Batched scaled dot-product attention over trailing [T, dh] axes.

    q [..., Tq, dh], k/v [..., Tk, dh]. Returns (out, cache); cache is None
    unless train. Counts query-key dot products for the parity instrumentation.
    """
    dh = q.shape[-1]
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    count_qk_dots(int(np.prod(scores.shape)))
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    out = scores @ v
    cache = (q, k, v, scores) if train else None
    return out, cache


def attention_backward(dout: np.ndarray, cache):
    q, k, v, p = cache
    dh = q.shape[-1]
    scale = 1.0 / math.sqrt(dh)
    dv = np.swapaxes(p, -1, -2) @ dout
    dp = dout @ np.swapaxes(v, -1, -2)
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (np.swapaxes(ds, -1, -2) @ q) * scale
    return dq, dk, dv


def timestep_embedding(t: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of a scalar timestep, [dim] float32."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    ang = float(t) * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)]).astype(np.float32)
