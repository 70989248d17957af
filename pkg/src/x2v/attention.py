"""Hybrid self-attention: spatial self-attention blended with reference
attention and multi-head-full temporal attention.

The blend scalars start at zero so a fresh layer reproduces plain
self-attention bitwise. Reference attention carries two switchable low-rank
adapter branches (start frame / end frame); temporal attention carries one
adapter branch per inference mode (keyframe, interpolation level 1..K-1).
Head h of frame i attends frame (i + h) mod N in the temporal path, which
covers all frames at self-attention cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, MissingReferenceError, ShapeError
from .kernel import Rng
from .layers import Layer, Param, attention_backward, attention_forward, glorot

KEYFRAME = "keyframe"
INTERPOLATION = "interpolation"


@dataclass(frozen=True)
class AttentionMode:
    """Inference mode: keyframe prediction or interpolation at a level."""

    kind: str
    level: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (KEYFRAME, INTERPOLATION):
            raise ConfigError(f"unknown attention mode kind: {self.kind!r}")
        if self.kind == INTERPOLATION and (self.level is None or self.level < 1):
            raise ConfigError("interpolation mode requires a level >= 1")

    @property
    def ref_alphas(self) -> tuple[float, float]:
        """(start-frame, end-frame) reference branch weights."""
        return (1.0, 0.0) if self.kind == KEYFRAME else (0.5, 0.5)


def keyframe_mode() -> AttentionMode:
    return AttentionMode(KEYFRAME)


def interpolation_mode(level: int) -> AttentionMode:
    return AttentionMode(INTERPOLATION, level)


class LowRankAdapter(Layer):
    """Additive low-rank correction up(down(x)); up starts at zero so the
    adapter contributes exactly nothing until trained."""

    def __init__(self, d: int, rank: int, rng: Rng):
        if rank > d:
            raise ConfigError(f"adapter rank {rank} exceeds dim {d}")
        self.down = Param(glorot(rng, d, rank))
        self.up = Param(np.zeros((rank, d), np.float32))
        self._x = None
        self._h = None

    def apply(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        h = x @ self.down.data
        if train:
            self._x, self._h = x, h
        return h @ self.up.data

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, h = self._x, self._h
        self._x = self._h = None
        hf = h.reshape(-1, h.shape[-1])
        dyf = dy.reshape(-1, dy.shape[-1])
        self.up.add_grad(hf.T @ dyf)
        dh = dy @ self.up.data.T
        xf = x.reshape(-1, x.shape[-1])
        self.down.add_grad(xf.T @ dh.reshape(-1, dh.shape[-1]))
        return dh @ self.down.data.T


def apply_adapter(w_base: np.ndarray, adapter: LowRankAdapter, x: np.ndarray) -> np.ndarray:
    """Base projection plus the adapter's low-rank delta."""
    if x.shape[-1] != w_base.shape[0]:
        raise ShapeError(f"input {x.shape} vs base weight {w_base.shape}")
    return x @ w_base + adapter.apply(x)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    y = x.swapaxes(-2, -3)
    *lead, t, h, dh = y.shape
    return np.ascontiguousarray(y).reshape(*lead, t, h * dh)


class _AdapterBranch(Layer):
    """One switchable q/k/v adapter triple."""

    def __init__(self, d: int, rank: int, rng: Rng):
        self.q = LowRankAdapter(d, rank, rng)
        self.k = LowRankAdapter(d, rank, rng)
        self.v = LowRankAdapter(d, rank, rng)


class HybridAttentionWeights(Layer):
    """Weights and forward/backward rules for one hybrid self-attention layer.

    Paths: self (q/k/v/out), reference (q/k/v base copied from self at init,
    two adapter branches, own out), temporal (q/k/v base copied from self,
    `levels` adapter branches, own out). alpha_r and alpha_t are the
    learnable blend scalars, zero at init.
    """

    def __init__(self, d: int, heads: int, levels: int, rng: Rng, rank: int = 4):
        if heads < 1 or d % heads != 0:
            raise ConfigError(f"dim {d} not divisible by heads {heads}")
        if levels < 1:
            raise ConfigError("levels must be >= 1")
        self.d, self.heads, self.levels = d, heads, levels
        self.self_q = Param(glorot(rng, d, d))
        self.self_k = Param(glorot(rng, d, d))
        self.self_v = Param(glorot(rng, d, d))
        self.self_o = Param(glorot(rng, d, d))
        self.ref_q = Param(self.self_q.data.copy())
        self.ref_k = Param(self.self_k.data.copy())
        self.ref_v = Param(self.self_v.data.copy())
        self.ref_o = Param(self.self_o.data.copy())
        self.ref_branches = [_AdapterBranch(d, rank, rng) for _ in range(2)]
        self.temp_q = Param(self.self_q.data.copy())
        self.temp_k = Param(self.self_k.data.copy())
        self.temp_v = Param(self.self_v.data.copy())
        self.temp_o = Param(self.self_o.data.copy())
        self.temp_branches = [_AdapterBranch(d, rank, rng) for _ in range(levels)]
        self.alpha_r = Param(np.zeros((), np.float32))
        self.alpha_t = Param(np.zeros((), np.float32))
        self._cache: dict = {}

    # -- mode plumbing ------------------------------------------------------

    def temporal_branch(self, mode: AttentionMode) -> int:
        if mode.kind == KEYFRAME:
            return 0
        if self.levels < 2:
            raise ConfigError("interpolation mode needs a layer built with levels >= 2")
        return min(mode.level, self.levels - 1)

    def require_frames(self, f: np.ndarray) -> None:
        if f.ndim != 3 or f.shape[-1] != self.d:
            raise ShapeError(f"expected [N, tokens, {self.d}] features, got {f.shape}")

    # -- self path ----------------------------------------------------------

    def self_forward(self, f: np.ndarray, train: bool = False) -> np.ndarray:
        self.require_frames(f)
        h = self.heads
        q = _split_heads(f @ self.self_q.data, h)
        k = _split_heads(f @ self.self_k.data, h)
        v = _split_heads(f @ self.self_v.data, h)
        out, cache = attention_forward(q, k, v, train)
        merged = _merge_heads(out)
        y = merged @ self.self_o.data
        if train:
            self._cache["self"] = (f, cache, merged)
        return y

    def self_backward(self, dy: np.ndarray) -> np.ndarray:
        f, cache, merged = self._cache.pop("self")
        h = self.heads
        mf = merged.reshape(-1, self.d)
        self.self_o.add_grad(mf.T @ dy.reshape(-1, self.d))
        dmerged = dy @ self.self_o.data.T
        dq, dk, dv = attention_backward(_split_heads(dmerged, h), cache)
        df = np.zeros_like(f)
        ff = f.reshape(-1, self.d)
        for dg, w in ((dq, self.self_q), (dk, self.self_k), (dv, self.self_v)):
            g = _merge_heads(dg)
            w.add_grad(ff.T @ g.reshape(-1, self.d))
            df += g @ w.data.T
        return df

    # -- reference path -----------------------------------------------------

    def _ref_sources(self, f0, fN1, mode):
        alphas = mode.ref_alphas
        sources = [(0, alphas[0], f0)]
        if mode.kind == INTERPOLATION:
            sources.append((1, alphas[1], fN1))
        return sources

    def ref_forward(self, f: np.ndarray, f0: np.ndarray, fN1: Optional[np.ndarray],
                    mode: AttentionMode, train: bool = False) -> np.ndarray:
        self.require_frames(f)
        if mode.kind == INTERPOLATION and fN1 is None:
            raise MissingReferenceError("interpolation mode requires an end-frame reference")
        h = self.heads
        blended = None
        caches = []
        for b, alpha, src in self._ref_sources(f0, fN1, mode):
            br = self.ref_branches[b]
            q = _split_heads(f @ self.ref_q.data + br.q.apply(f, train), h)
            k = _split_heads(src @ self.ref_k.data + br.k.apply(src, train), h)[None]
            v = _split_heads(src @ self.ref_v.data + br.v.apply(src, train), h)[None]
            out, cache = attention_forward(q, k, v, train)
            out = _merge_heads(out)
            blended = alpha * out if blended is None else blended + alpha * out
            caches.append((b, alpha, src, cache))
        y = blended @ self.ref_o.data
        if train:
            self._cache["ref"] = (f, blended, caches)
        return y

    def ref_backward(self, dy: np.ndarray):
        """Returns (df, df0, dfN1); dfN1 is None in keyframe mode."""
        f, blended, caches = self._cache.pop("ref")
        h = self.heads
        self.ref_o.add_grad(blended.reshape(-1, self.d).T @ dy.reshape(-1, self.d))
        dblended = dy @ self.ref_o.data.T
        df = np.zeros_like(f)
        dsrc_out = [None, None]
        ff = f.reshape(-1, self.d)
        for b, alpha, src, cache in caches:
            br = self.ref_branches[b]
            dout = _split_heads(alpha * dblended, h)
            dq, dk, dv = attention_backward(dout, cache)
            dqm = _merge_heads(dq)
            self.ref_q.add_grad(ff.T @ dqm.reshape(-1, self.d))
            df += dqm @ self.ref_q.data.T + br.q.backward(dqm)
            dsrc = np.zeros_like(src)
            sf = src.reshape(-1, self.d)
            for dg, w, ad in ((dk, self.ref_k, br.k), (dv, self.ref_v, br.v)):
                g = _merge_heads(dg.sum(axis=0))
                w.add_grad(sf.T @ g.reshape(-1, self.d))
                dsrc += g @ w.data.T + ad.backward(g)
            dsrc_out[b] = dsrc
        return df, dsrc_out[0], dsrc_out[1]

    # -- temporal path ------------------------------------------------------

    def _kv_index(self, n: int) -> np.ndarray:
        offs = np.arange(self.heads) % n
        return (np.arange(n)[:, None] + offs[None, :]) % n  # [N, H]

    def temp_forward(self, f: np.ndarray, mode: AttentionMode, train: bool = False) -> np.ndarray:
        self.require_frames(f)
        n = f.shape[0]
        h = self.heads
        br = self.temp_branches[self.temporal_branch(mode)]
        q = _split_heads(f @ self.temp_q.data + br.q.apply(f, train), h)
        k = _split_heads(f @ self.temp_k.data + br.k.apply(f, train), h)
        v = _split_heads(f @ self.temp_v.data + br.v.apply(f, train), h)
        idx = self._kv_index(n)
        harange = np.arange(h)
        kg = k[idx, harange[None, :]]  # [N, H, T, dh], head h reads frame (i+h) mod N
        vg = v[idx, harange[None, :]]
        out, cache = attention_forward(q, kg, vg, train)
        merged = _merge_heads(out)
        y = merged @ self.temp_o.data
        if train:
            self._cache["temp"] = (f, merged, cache, idx, br)
        return y

    def temp_backward(self, dy: np.ndarray) -> np.ndarray:
        f, merged, cache, idx, br = self._cache.pop("temp")
        h = self.heads
        self.temp_o.add_grad(merged.reshape(-1, self.d).T @ dy.reshape(-1, self.d))
        dmerged = dy @ self.temp_o.data.T
        dq, dkg, dvg = attention_backward(_split_heads(dmerged, h), cache)
        harange = np.arange(h)
        dk = np.zeros_like(dkg)
        dv = np.zeros_like(dvg)
        np.add.at(dk, (idx, harange[None, :]), dkg)
        np.add.at(dv, (idx, harange[None, :]), dvg)
        df = np.zeros_like(f)
        ff = f.reshape(-1, self.d)
        for dg, w, ad in ((dq, self.temp_q, br.q), (dk, self.temp_k, br.k), (dv, self.temp_v, br.v)):
            g = _merge_heads(dg)
            w.add_grad(ff.T @ g.reshape(-1, self.d))
            df += g @ w.data.T + ad.backward(g)
        return df

    # -- hybrid blend -------------------------------------------------------

    def forward(self, f: np.ndarray, f0: np.ndarray, fN1: Optional[np.ndarray],
                mode: AttentionMode, train: bool = False) -> np.ndarray:
        """(1 - a_r - a_t) self + a_r ref + a_t temporal, on projected outputs."""
        ys = self.self_forward(f, train)
        yr = self.ref_forward(f, f0, fN1, mode, train)
        yt = self.temp_forward(f, mode, train)
        ar = float(self.alpha_r.data)
        at = float(self.alpha_t.data)
        y = (1.0 - ar - at) * ys + ar * yr + at * yt
        if train:
            self._cache["blend"] = (ys, yr, yt)
        return y

    def backward(self, dy: np.ndarray):
        """Returns (df, df0, dfN1) for the explicit-source forward."""
        ys, yr, yt = self._cache.pop("blend")
        ar = float(self.alpha_r.data)
        at = float(self.alpha_t.data)
        self.alpha_r.add_grad(np.asarray((dy * (yr - ys)).sum(), dtype=self.alpha_r.data.dtype))
        self.alpha_t.add_grad(np.asarray((dy * (yt - ys)).sum(), dtype=self.alpha_t.data.dtype))
        df = self.self_backward((1.0 - ar - at) * dy)
        dfr, df0, dfN1 = self.ref_backward(ar * dy)
        df += dfr
        df += self.temp_backward(at * dy)
        return df, df0, dfN1


def self_attention(f: np.ndarray, w: HybridAttentionWeights) -> np.ndarray:
    """Per-frame spatial self-attention over tokens."""
    return w.self_forward(f)


def reference_attention(f: np.ndarray, f0: np.ndarray, fN1: Optional[np.ndarray],
                        mode: AttentionMode, w: HybridAttentionWeights) -> np.ndarray:
    """Attention of every frame onto the start (and, when interpolating, end)
    reference features, weighted by the mode's branch alphas."""
    return w.ref_forward(f, f0, fN1, mode)


def mhf_temporal_attention(f: np.ndarray, w: HybridAttentionWeights,
                           mode: AttentionMode) -> np.ndarray:
    """Multi-head-full temporal attention: head h of frame i reads frame
    (i + h) mod N."""
    return w.temp_forward(f, mode)


def hybrid_forward(f: np.ndarray, f0: np.ndarray, fN1: Optional[np.ndarray],
                   mode: AttentionMode, w: HybridAttentionWeights) -> np.ndarray:
    """Full blended layer output."""
    return w.forward(f, f0, fN1, mode)
