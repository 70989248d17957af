"""Deterministic dense-tensor substrate.

float32 arrays with a small set of numeric primitives: matrix product,
row softmax, multi-head scaled dot-product attention, affine maps over the
trailing axis, and counter-based seeded Gaussian noise. Every function is a
pure map from (inputs, seed); repeated calls are bitwise identical.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

Shape = tuple[int, ...]

_MAX_RANK = 4


def check_shape(dims: Sequence[int]) -> Shape:
    """Validate extents: rank 2..4, every extent >= 1."""
    dims = tuple(int(d) for d in dims)
    if not (2 <= len(dims) <= _MAX_RANK):
        raise ShapeError(f"rank must be 2..{_MAX_RANK}, got {dims}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"extents must be >= 1, got {dims}")
    return dims


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Coerce to a C-contiguous float32 array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(check_shape(shape))
    return arr


# --------------------------------------------------------------------------
# Instrumentation: query-key dot products performed by attention kernels.
# Used to assert that MHF temporal attention costs the same as self-attention.

_QK_DOTS = 0


def reset_qk_dots() -> None:
    global _QK_DOTS
    _QK_DOTS = 0


def qk_dots() -> int:
    return _QK_DOTS


def count_qk_dots(n: int) -> None:
    global _QK_DOTS
    _QK_DOTS += int(n)


# --------------------------------------------------------------------------
# Seeded RNG


class Rng:
    """Counter-based random stream (Philox).

    State is (seed, draw index); each draw opens a fresh 2^64 counter block,
    so identical (seed, call sequence) reproduces identical outputs on any
    platform and the state serializes as two integers.
    """

    def __init__(self, seed: int, draws: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.draws = int(draws)

    def _next_generator(self) -> np.random.Generator:
        bg = np.random.Philox(key=self.seed)
        bg.advance(self.draws * (1 << 64))
        self.draws += 1
        return np.random.Generator(bg)

    def state(self) -> tuple[int, int]:
        return (self.seed, self.draws)

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        """Standard normal samples via Box-Muller on the counter stream."""
        n = int(np.prod(shape)) if len(shape) else 1
        gen = self._next_generator()
        u = gen.random(size=(2, n))  # float64 in [0, 1)
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        z = r * np.cos(2.0 * np.pi * u[1])
        return z.astype(np.float32).reshape(tuple(shape))

    def uniform(self, shape: Optional[Sequence[int]] = None) -> np.ndarray | float:
        gen = self._next_generator()
        if shape is None:
            return float(gen.random())
        return gen.random(size=tuple(shape)).astype(np.float32)

    def integers(self, low: int, high: int, size: Optional[int] = None):
        """Uniform integers in [low, high)."""
        gen = self._next_generator()
        if size is None:
            return int(gen.integers(low, high))
        return gen.integers(low, high, size=size)

    def choice_weighted(self, weights: Sequence[float]) -> int:
        """Index sampled with probability proportional to the given weights."""
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise ConfigError("weights must be a non-empty 1-d sequence")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigError("weights must be finite and non-negative")
        total = w.sum()
        if total <= 0.0:  # degenerate: fall back to uniform
            w = np.ones_like(w)
            total = w.sum()
        cdf = np.cumsum(w / total)
        u = self._next_generator().random()
        return int(np.searchsorted(cdf, u, side="right").clip(0, len(w) - 1))

    def spawn(self) -> "Rng":
        """Derive an independent child stream (deterministic in call order)."""
        child_seed = int(self._next_generator().integers(0, 1 << 63))
        return Rng(child_seed)


def gaussian_noise(shape: Sequence[int], rng: Rng) -> np.ndarray:
    """Seeded i.i.d. standard normal tensor of the given shape."""
    return rng.normal(check_shape(shape))


# --------------------------------------------------------------------------
# Numeric primitives


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a [m, k] and b [k, n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with row-max subtraction for stability."""
    if x.ndim < 2:
        raise ShapeError(f"softmax_rows expects rank >= 2, got {x.shape}")
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Affine map over the trailing axis: x @ weight (+ bias)."""
    if weight.ndim != 2:
        raise ShapeError(f"weight must be rank 2, got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"trailing dim {x.shape} does not match weight {weight.shape}")
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def multi_head_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    """Scaled dot-product attention, heads split over the trailing dim.

    q [m, d], k [n, d], v [n, d] -> [m, d]. Per head: softmax(q k^T / sqrt(d_h)) v,
    heads concatenated. No output projection (that belongs to the caller).
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"expected rank-2 q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise ShapeError(f"model dims disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value row counts disagree: {k.shape} vs {v.shape}")
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by heads {heads}")
    m, n = q.shape[0], k.shape[0]
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.reshape(m, heads, dh).transpose(1, 0, 2)  # [H, m, dh]
    kh = k.reshape(n, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(n, heads, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * np.float32(scale)  # [H, m, n]
    count_qk_dots(heads * m * n)
    probs = softmax_rows(scores)
    out = probs @ vh  # [H, m, dh]
    return np.ascontiguousarray(out.transpose(1, 0, 2).reshape(m, d))
