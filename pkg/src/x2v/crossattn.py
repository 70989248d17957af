"""Masked cross-attention: one global prompt everywhere plus local prompts
confined to binary mask regions.

Output = CAttn(f, T_g) + sum_p M_p * CAttn(f, T_p); a position outside every
mask is bitwise independent of all local prompt contents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .kernel import Rng
from .layers import Layer, Param, attention_backward, attention_forward, glorot


@dataclass
class PromptEmbedding:
    """Token embedding rows for one prompt, [L_t, d_text] with L_t >= 1."""

    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 2 or t.shape[0] < 1:
            raise ConfigError(f"prompt embedding must be [L_t >= 1, d_text], got {t.shape}")
        self.tokens = t


@dataclass
class RegionMask:
    """Binary [h, w] mask at full resolution with cached downsampled copies."""

    grid: np.ndarray
    _scaled: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float32)
        if g.ndim != 2:
            raise ShapeError(f"mask grid must be rank 2, got {g.shape}")
        if not np.all((g == 0.0) | (g == 1.0)):
            raise ConfigError("mask grid must be binary")
        self.grid = g

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def at_factor(self, factor: int) -> "RegionMask":
        if factor == 1:
            return self
        cached = self._scaled.get(factor)
        if cached is None:
            cached = downsample_mask(self, factor)
            self._scaled[factor] = cached
        return cached


def downsample_mask(mask: RegionMask, factor: int) -> RegionMask:
    """Block-reduce by `factor` (power of two): cell = 1 iff block mean > 0.5."""
    if factor < 1 or (factor & (factor - 1)) != 0:
        raise ConfigError(f"factor must be a power of two, got {factor}")
    if factor == 1:
        return mask
    h, w = mask.grid.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask {h}x{w} not divisible by factor {factor}")
    blocks = mask.grid.reshape(h // factor, factor, w // factor, factor)
    means = blocks.mean(axis=(1, 3))
    return RegionMask((means > 0.5).astype(np.float32))


class MaskedCrossAttention(Layer):
    """Cross-attention weights shared by the global and all local prompts."""

    def __init__(self, d: int, d_text: int, heads: int, rng: Rng):
        if d % heads != 0:
            raise ConfigError(f"dim {d} not divisible by heads {heads}")
        self.d, self.d_text, self.heads = d, d_text, heads
        self.wq = Param(glorot(rng, d, d))
        self.wk = Param(glorot(rng, d_text, d))
        self.wv = Param(glorot(rng, d_text, d))
        self.wo = Param(glorot(rng, d, d))
        self._cache = None

    # one attention call: rows of f against one prompt
    def _attend(self, f: np.ndarray, emb: np.ndarray, train: bool):
        if emb.shape[0] < 1:
            raise ConfigError("prompt must hold at least one token")
        if emb.shape[1] != self.d_text:
            raise ShapeError(f"prompt dim {emb.shape} vs d_text {self.d_text}")
        if f.shape[-1] != self.d:
            raise ShapeError(f"features {f.shape} vs dim {self.d}")
        h, dh = self.heads, self.d // self.heads
        r = f.shape[0]
        q = (f @ self.wq.data).reshape(r, h, dh).transpose(1, 0, 2)
        k = (emb @ self.wk.data).reshape(-1, h, dh).transpose(1, 0, 2)
        v = (emb @ self.wv.data).reshape(-1, h, dh).transpose(1, 0, 2)
        out, att_cache = attention_forward(q, k, v, train)
        merged = np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(r, self.d)
        y = merged @ self.wo.data
        cache = (f, emb, merged, att_cache) if train else None
        return y, cache

    def _attend_backward(self, dy: np.ndarray, cache):
        f, emb, merged, att_cache = cache
        h, dh = self.heads, self.d // self.heads
        r = f.shape[0]
        self.wo.add_grad(merged.T @ dy)
        dmerged = dy @ self.wo.data.T
        dq, dk, dv = attention_backward(dmerged.reshape(r, h, dh).transpose(1, 0, 2), att_cache)
        dqm = np.ascontiguousarray(dq.transpose(1, 0, 2)).reshape(r, self.d)
        self.wq.add_grad(f.T @ dqm)
        df = dqm @ self.wq.data.T
        demb = np.zeros_like(emb)
        for dg, w in ((dk, self.wk), (dv, self.wv)):
            g = np.ascontiguousarray(dg.transpose(1, 0, 2)).reshape(-1, self.d)
            w.add_grad(emb.T @ g)
            demb += g @ w.data.T
        return df, demb

    # -- net-facing batched forward over N frames ---------------------------

    def forward(self, f: np.ndarray, emb_g: np.ndarray,
                locals_: Sequence[tuple[np.ndarray, np.ndarray]],
                train: bool = False) -> np.ndarray:
        """f [N, T, d]; emb_g [L, d_text]; locals_ = (emb_p, mask_p [N, T])."""
        n, t, d = f.shape
        flat = f.reshape(n * t, d)
        yg, cg = self._attend(flat, emb_g, train)
        y = yg.reshape(n, t, d)
        lc = []
        for emb_p, mask_p in locals_:
            if mask_p.shape != (n, t):
                raise ShapeError(f"mask {mask_p.shape} vs tokens {(n, t)}")
            yp, cp = self._attend(flat, emb_p, train)
            y = y + mask_p[:, :, None] * yp.reshape(n, t, d)
            lc.append((mask_p, cp))
        if train:
            self._cache = (cg, lc, (n, t, d))
        return y

    def backward(self, dy: np.ndarray):
        """Returns (df, demb_g, demb_locals)."""
        cg, lc, (n, t, d) = self._cache
        self._cache = None
        dflat = dy.reshape(n * t, d)
        df, demb_g = self._attend_backward(dflat, cg)
        demb_locals = []
        for mask_p, cp in lc:
            dmasked = (dy * mask_p[:, :, None]).reshape(n * t, d)
            dfp, demb_p = self._attend_backward(dmasked, cp)
            df += dfp
            demb_locals.append(demb_p)
        return df.reshape(n, t, d), demb_g, demb_locals


def cross_attention(f: np.ndarray, prompt: PromptEmbedding, w: MaskedCrossAttention) -> np.ndarray:
    """Plain cross-attention of one frame's tokens [T, d] onto a prompt."""
    y, _ = w._attend(f, prompt.tokens, train=False)
    return y


def _mask_row(mask: RegionMask, t: int) -> np.ndarray:
    flat = mask.grid.reshape(-1)
    if flat.shape[0] != t:
        raise ShapeError(f"mask {mask.grid.shape} does not cover {t} tokens")
    return flat


def masked_cross_attention(f: np.ndarray, t_g: PromptEmbedding,
                           locals_: Sequence[tuple[PromptEmbedding, RegionMask]],
                           w: MaskedCrossAttention,
                           p_max: Optional[int] = None) -> np.ndarray:
    """Global attention plus mask-gated local attentions for one frame [T, d]."""
    if p_max is not None and len(locals_) > p_max:
        raise ConfigError(f"{len(locals_)} local prompts exceed P_max={p_max}")
    t = f.shape[0]
    pairs = [(p.tokens, _mask_row(m, t)[None, :]) for p, m in locals_]
    return w.forward(f[None], t_g.tokens, pairs)[0]


def null_prompt(d_text: int) -> PromptEmbedding:
    """All-zero single-token prompt (used only by tests; the net supplies a
    learned null token for empty prompts)."""
    return PromptEmbedding(np.zeros((1, d_text), np.float32))
