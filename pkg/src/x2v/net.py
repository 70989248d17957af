"""The toy video denoiser.

Assembles the channel-concatenated input (noisy frames, intrinsic channels,
zero-padded reference array, local masks), embeds prompts from a learned
token table, and predicts v for N frames jointly with a small encoder -
decoder: conv-in -> two down blocks -> bottleneck -> two up blocks ->
conv-out, every block being conv + hybrid self-attention + masked
cross-attention with an additive sinusoidal timestep entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import (AttentionMode, HybridAttentionWeights, INTERPOLATION,
                        KEYFRAME)
from .crossattn import MaskedCrossAttention, PromptEmbedding, RegionMask
from .errors import ConfigError, MissingReferenceError, ShapeError
from .kernel import Rng
from .layers import (Conv2d, Layer, Linear, Param, SiLU, LayerNorm,
                     timestep_embedding, upsample2_backward, upsample2_forward)

INTRINSIC_CHANNELS = 11  # albedo 3 + normal 3 + irradiance 3 + roughness 1 + metallicity 1


@dataclass
class ModelConfig:
    """Denoiser hyperparameters. heads must cover the frame count (every
    frame offset needs a head) and the spatial size must survive two
    downsamplings."""

    frames: int = 5
    height: int = 32
    width: int = 32
    base_channels: int = 32
    heads: int = 8
    levels: int = 3
    p_max: int = 4
    vocab_size: int = 19
    d_text: int = 32
    adapter_rank: int = 4
    temb_dim: int = 64

    def __post_init__(self):
        if self.heads < self.frames:
            raise ConfigError(f"heads {self.heads} must be >= frames {self.frames}")
        if self.height % 4 or self.width % 4:
            raise ConfigError("height and width must be divisible by 4")
        if (2 * self.base_channels) % self.heads:
            raise ConfigError("2 * base_channels must be divisible by heads")
        if self.levels < 1 or self.p_max < 0 or self.vocab_size < 1:
            raise ConfigError("invalid levels / p_max / vocab_size")

    @property
    def c_in(self) -> int:
        return 3 + INTRINSIC_CHANNELS + 3 + self.p_max


@dataclass
class IntrinsicStack:
    """The five condition channels for a frame window, each [N, C, h, w],
    with per-channel availability flags."""

    albedo: np.ndarray
    normal: np.ndarray
    irradiance: np.ndarray
    roughness: np.ndarray
    metallicity: np.ndarray
    availability: dict = field(default_factory=dict)

    CHANNEL_NAMES = ("albedo", "normal", "irradiance", "roughness", "metallicity")
    CHANNEL_WIDTHS = {"albedo": 3, "normal": 3, "irradiance": 3, "roughness": 1, "metallicity": 1}

    def __post_init__(self):
        for name in self.CHANNEL_NAMES:
            self.availability.setdefault(name, True)
            arr = getattr(self, name)
            if arr.ndim != 4 or arr.shape[1] != self.CHANNEL_WIDTHS[name]:
                raise ShapeError(f"{name} must be [N, {self.CHANNEL_WIDTHS[name]}, h, w], got {arr.shape}")

    @property
    def n_frames(self) -> int:
        return self.albedo.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.albedo.shape[2], self.albedo.shape[3]

    def channels(self):
        for name in self.CHANNEL_NAMES:
            yield name, getattr(self, name)

    def concat(self) -> np.ndarray:
        return np.concatenate([arr for _, arr in self.channels()], axis=1)

    def with_dropped(self, dropped: dict) -> "IntrinsicStack":
        fields_ = {}
        avail = dict(self.availability)
        for name, arr in self.channels():
            if dropped.get(name, False):
                fields_[name] = np.zeros_like(arr)
                avail[name] = False
            else:
                fields_[name] = arr
        return IntrinsicStack(availability=avail, **fields_)

    def window(self, start: int, count: int) -> "IntrinsicStack":
        sl = slice(start, start + count)
        return IntrinsicStack(self.albedo[sl], self.normal[sl], self.irradiance[sl],
                              self.roughness[sl], self.metallicity[sl],
                              dict(self.availability))

    def take(self, indices: Sequence[int]) -> "IntrinsicStack":
        idx = np.asarray(indices)
        return IntrinsicStack(self.albedo[idx], self.normal[idx], self.irradiance[idx],
                              self.roughness[idx], self.metallicity[idx],
                              dict(self.availability))

    def validate(self) -> None:
        for name, arr in self.channels():
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} holds non-finite values")
        for name in ("albedo", "roughness", "metallicity"):
            arr = getattr(self, name)
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ShapeError(f"{name} outside [0, 1]")
        if self.irradiance.min() < 0.0:
            raise ShapeError("irradiance must be >= 0")
        if self.availability.get("normal", True):
            vec = 2.0 * self.normal - 1.0
            norms = np.sqrt((vec * vec).sum(axis=1))
            if np.abs(norms - 1.0).max() > 1e-3:
                raise ShapeError("normals are not unit length within 1e-3")


@dataclass
class ReferenceArray:
    """Reference frames zero-padded along time: keyframe mode keeps slot 0,
    interpolation mode keeps slots 0 and N-1."""

    frames: np.ndarray
    mode: AttentionMode

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ShapeError(f"reference array must be [N, 3, h, w], got {self.frames.shape}")
        n = self.frames.shape[0]
        interior = self.frames[1:] if self.mode.kind == KEYFRAME else self.frames[1:n - 1]
        if interior.size and np.any(interior != 0.0):
            raise ConfigError("reference array padding slots must be identically zero")


def pad_reference(r0: np.ndarray, rN1: Optional[np.ndarray], n: int,
                  mode: AttentionMode) -> ReferenceArray:
    """Build [r0, 0, ..., 0] (keyframe) or [r0, 0, ..., 0, rN1] (interpolation)."""
    if r0.ndim != 3 or r0.shape[0] != 3:
        raise ShapeError(f"reference frame must be [3, h, w], got {r0.shape}")
    if mode.kind == INTERPOLATION:
        if rN1 is None:
            raise MissingReferenceError("interpolation mode requires an end reference frame")
        if n < 2:
            raise ConfigError("interpolation needs n >= 2")
        if rN1.shape != r0.shape:
            raise ShapeError(f"end reference {rN1.shape} vs start {r0.shape}")
    elif rN1 is not None:
        raise ConfigError("keyframe mode takes no end reference")
    frames = np.zeros((n,) + r0.shape, dtype=r0.dtype)
    frames[0] = r0
    if mode.kind == INTERPOLATION:
        frames[n - 1] = rN1
    return ReferenceArray(frames, mode)


def assemble_input(x_t: np.ndarray, intrinsics: IntrinsicStack, ref: ReferenceArray,
                   masks: Sequence[Sequence[RegionMask]], p_max: int = 4) -> np.ndarray:
    """Fixed channel layout:
    [noisy 3 | albedo 3 | normal 3 | irradiance 3 | roughness 1 |
     metallicity 1 | reference 3 | masks p_max]. Absent masks zero-filled."""
    n, _, h, w = x_t.shape
    if x_t.shape[1] != 3:
        raise ShapeError(f"noisy frames must be [N, 3, h, w], got {x_t.shape}")
    if intrinsics.n_frames != n or intrinsics.spatial != (h, w):
        raise ShapeError(f"intrinsics {intrinsics.spatial}x{intrinsics.n_frames} vs noisy {x_t.shape}")
    if ref.frames.shape != x_t.shape:
        raise ShapeError(f"reference {ref.frames.shape} vs noisy {x_t.shape}")
    if len(masks) > p_max:
        raise ConfigError(f"{len(masks)} mask tracks exceed p_max={p_max}")
    mask_block = np.zeros((n, p_max, h, w), dtype=x_t.dtype)
    for p, track in enumerate(masks):
        if len(track) != n:
            raise ShapeError(f"mask track {p} has {len(track)} frames, expected {n}")
        for i, m in enumerate(track):
            if m.shape != (h, w):
                raise ShapeError(f"mask {m.shape} vs frames {(h, w)}")
            mask_block[i, p] = m.grid
    return np.concatenate([x_t, intrinsics.concat(), ref.frames, mask_block], axis=1)


class _Film(Layer):
    """Per-channel scale/shift of conv maps from the timestep embedding."""

    def __init__(self, temb_dim: int, channels: int, rng: Rng):
        self.proj = Linear(temb_dim, 2 * channels, rng, zero=True)
        self.channels = channels
        self._cache = None

    def forward(self, h: np.ndarray, temb: np.ndarray, train: bool = False) -> np.ndarray:
        sb = self.proj.forward(temb, train)
        scale, shift = sb[:self.channels], sb[self.channels:]
        if train:
            self._cache = (h, scale)
        return h * (1.0 + scale)[None, :, None, None] + shift[None, :, None, None]

    def backward(self, dy: np.ndarray):
        h, scale = self._cache
        self._cache = None
        dh = dy * (1.0 + scale)[None, :, None, None]
        dscale = (dy * h).sum(axis=(0, 2, 3))
        dshift = dy.sum(axis=(0, 2, 3))
        dtemb = self.proj.backward(np.concatenate([dscale, dshift]))
        return dh, dtemb


class _Stem(Layer):
    """Full-resolution entry: conv -> FiLM -> norm -> SiLU -> conv."""

    def __init__(self, c_in: int, c_out: int, cfg: ModelConfig, rng: Rng):
        self.conv1 = Conv2d(c_in, c_out, rng)
        self.film = _Film(cfg.temb_dim, c_out, rng)
        self.norm = LayerNorm(c_out, axis=1)
        self.act = SiLU()
        self.conv2 = Conv2d(c_out, c_out, rng)

    def forward(self, x, temb, train=False):
        h = self.conv1.forward(x, train)
        h = self.film.forward(h, temb, train)
        h = self.act.forward(self.norm.forward(h, train), train)
        return self.conv2.forward(h, train)

    def backward(self, dy):
        dh = self.conv2.backward(dy)
        dh = self.norm.backward(self.act.backward(dh))
        dh, dtemb = self.film.backward(dh)
        return self.conv1.backward(dh), dtemb


class _OutHead(Layer):
    """Full-resolution exit: norm -> FiLM -> SiLU -> conv -> SiLU -> conv(zero)."""

    def __init__(self, c_in: int, c_mid: int, cfg: ModelConfig, rng: Rng):
        self.norm = LayerNorm(c_in, axis=1)
        self.film = _Film(cfg.temb_dim, c_in, rng)
        self.act1 = SiLU()
        self.conv1 = Conv2d(c_in, c_mid, rng)
        self.act2 = SiLU()
        self.conv2 = Conv2d(c_mid, 3, rng, zero=True)

    def forward(self, x, temb, train=False):
        h = self.norm.forward(x, train)
        h = self.film.forward(h, temb, train)
        h = self.conv1.forward(self.act1.forward(h, train), train)
        return self.conv2.forward(self.act2.forward(h, train), train)

    def backward(self, dy):
        dh = self.act2.backward(self.conv2.backward(dy))
        dh = self.act1.backward(self.conv1.backward(dh))
        dh, dtemb = self.film.backward(dh)
        return self.norm.backward(dh), dtemb


class _Block(Layer):
    """conv (+ timestep scale/shift, norm, SiLU) -> hybrid self-attention ->
    masked cross-attention, optionally followed by x2 nearest upsampling."""

    def __init__(self, c_in: int, c_out: int, cfg: ModelConfig, rng: Rng,
                 stride: int = 1, upsample: bool = False):
        self.conv = Conv2d(c_in, c_out, rng, stride=stride)
        self.norm1 = LayerNorm(c_out, axis=1)
        self.film = _Film(cfg.temb_dim, c_out, rng)
        self.act = SiLU()
        self.attn_norm = LayerNorm(c_out, axis=-1)
        self.attn = HybridAttentionWeights(c_out, cfg.heads, cfg.levels, rng,
                                           rank=cfg.adapter_rank)
        self.x_norm = LayerNorm(c_out, axis=-1)
        self.xattn = MaskedCrossAttention(c_out, cfg.d_text, cfg.heads, rng)
        self.upsample = upsample
        self.c_out = c_out
        self._cache = None

    def forward(self, x: np.ndarray, temb: np.ndarray, emb_g: np.ndarray,
                locals_: list, mode: AttentionMode, train: bool = False) -> np.ndarray:
        h = self.conv.forward(x, train)
        n, c, hs, ws = h.shape
        h2 = self.film.forward(self.norm1.forward(h, train), temb, train)
        h3 = self.act.forward(h2, train)
        tokens = np.ascontiguousarray(h3.reshape(n, c, hs * ws).transpose(0, 2, 1))
        a_in = self.attn_norm.forward(tokens, train)
        fN1 = a_in[n - 1] if mode.kind == INTERPOLATION else None
        a_out = self.attn.forward(a_in, a_in[0], fN1, mode, train)
        t2 = tokens + a_out
        c_in_ = self.x_norm.forward(t2, train)
        c_out = self.xattn.forward(c_in_, emb_g, locals_, train)
        t3 = t2 + c_out
        out = np.ascontiguousarray(t3.transpose(0, 2, 1)).reshape(n, c, hs, ws)
        if self.upsample:
            out = upsample2_forward(out)
        if train:
            self._cache = ((n, c, hs, ws), mode)
        return out

    def backward(self, dout: np.ndarray):
        (n, c, hs, ws), mode = self._cache
        self._cache = None
        if self.upsample:
            dout = upsample2_backward(dout)
        dt3 = np.ascontiguousarray(dout.reshape(n, c, hs * ws).transpose(0, 2, 1))
        dc_in, demb_g, demb_locals = self.xattn.backward(dt3)
        dt2 = dt3 + self.x_norm.backward(dc_in)
        da_in, df0, dfN1 = self.attn.backward(dt2)
        da_in[0] += df0
        if dfN1 is not None:
            da_in[n - 1] += dfN1
        dtokens = dt2 + self.attn_norm.backward(da_in)
        dh3 = np.ascontiguousarray(dtokens.transpose(0, 2, 1)).reshape(n, c, hs, ws)
        dh2 = self.act.backward(dh3)
        dhn, dtemb = self.film.backward(dh2)
        dh = self.norm1.backward(dhn)
        dx = self.conv.backward(dh)
        return dx, dtemb, demb_g, demb_locals


class VideoDenoiser(Layer):
    """v-prediction network over N frames jointly."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        cfg = config
        c0, c1 = cfg.base_channels, 2 * cfg.base_channels
        self.token_table = Param((rng.normal((cfg.vocab_size, cfg.d_text)) * 0.05).astype(np.float32))
        self.schedule = None  # attached by the training/sampling pipeline
        self.t_mlp1 = Linear(cfg.temb_dim, cfg.temb_dim, rng)
        self.t_act = SiLU()
        self.t_mlp2 = Linear(cfg.temb_dim, cfg.temb_dim, rng)
        self.conv_in = _Stem(cfg.c_in, c0, cfg, rng)
        self.down1 = _Block(c0, c1, cfg, rng, stride=2)
        self.down2 = _Block(c1, c1, cfg, rng, stride=2)
        self.mid = _Block(c1, c1, cfg, rng)
        self.up1 = _Block(2 * c1, c1, cfg, rng, upsample=True)
        self.up2 = _Block(c1 + c1, c1, cfg, rng, upsample=True)
        self.conv_out = _OutHead(c1 + c0, c0, cfg, rng)
        self._cache = None
        self._c0, self._c1 = c0, c1

    # -- prompts -------------------------------------------------------------

    def embed_prompt(self, token_ids: Sequence[int]) -> PromptEmbedding:
        """Rows of the learned token table; the empty prompt maps to the
        reserved null token (id 0)."""
        ids = self._prompt_ids(token_ids)
        return PromptEmbedding(self.token_table.data[ids].copy())

    def _prompt_ids(self, token_ids: Optional[Sequence[int]]) -> np.ndarray:
        ids = list(token_ids) if token_ids else [0]
        for i in ids:
            if not 0 <= int(i) < self.config.vocab_size:
                raise ConfigError(f"token id {i} outside vocabulary of {self.config.vocab_size}")
        return np.asarray(ids, dtype=np.int64)

    # -- forward / backward ---------------------------------------------------

    def _prepare_locals(self, masks, local_tokens, n):
        """Per-resolution (embedding, flat mask [N, T]) pairs, masks drawn from
        the same RegionMask objects that fill the input mask channels."""
        if local_tokens is None:
            local_tokens = [None] * len(masks)
        if len(local_tokens) != len(masks):
            raise ConfigError(f"{len(local_tokens)} local prompts vs {len(masks)} mask tracks")
        active = []  # (ids, track)
        for track, toks in zip(masks, local_tokens):
            if toks is None:
                continue
            active.append((self._prompt_ids(toks), track))
        by_factor = {}
        for factor in (2, 4):
            pairs = []
            for ids, track in active:
                flat = np.stack([m.at_factor(factor).grid.reshape(-1) for m in track])
                pairs.append((self.token_table.data[ids], flat))
            by_factor[factor] = pairs
        return active, by_factor

    def forward(self, t: float, x_t: np.ndarray, intrinsics: IntrinsicStack,
                ref: ReferenceArray, masks: Sequence[Sequence[RegionMask]],
                global_tokens: Optional[Sequence[int]], local_tokens,
                mode: AttentionMode, train: bool = False) -> np.ndarray:
        cfg = self.config
        if ref.mode != mode:
            raise ConfigError(f"reference array mode {ref.mode} vs call mode {mode}")
        n = x_t.shape[0]
        x_in = assemble_input(x_t, intrinsics, ref, masks, cfg.p_max).astype(x_t.dtype)

        temb0 = timestep_embedding(t, cfg.temb_dim).astype(x_t.dtype)
        temb = self.t_mlp2.forward(self.t_act.forward(self.t_mlp1.forward(temb0, train), train), train)

        g_ids = self._prompt_ids(global_tokens)
        emb_g = self.token_table.data[g_ids]
        active_locals, locals_by_factor = self._prepare_locals(masks, local_tokens, n)

        e0 = self.conv_in.forward(x_in, temb, train)
        d1 = self.down1.forward(e0, temb, emb_g, locals_by_factor[2], mode, train)
        d2 = self.down2.forward(d1, temb, emb_g, locals_by_factor[4], mode, train)
        m = self.mid.forward(d2, temb, emb_g, locals_by_factor[4], mode, train)
        u1 = self.up1.forward(np.concatenate([m, d2], axis=1), temb, emb_g,
                              locals_by_factor[4], mode, train)
        u2 = self.up2.forward(np.concatenate([u1, d1], axis=1), temb, emb_g,
                              locals_by_factor[2], mode, train)
        v = self.conv_out.forward(np.concatenate([u2, e0], axis=1), temb, train)
        if train:
            self._cache = (g_ids, active_locals)
        return v

    def denoise(self, t, x_t, intrinsics, ref, masks, global_tokens, local_tokens,
                mode) -> np.ndarray:
        """Inference forward pass; pure in all inputs."""
        return self.forward(t, x_t, intrinsics, ref, masks, global_tokens,
                            local_tokens, mode, train=False)

    def backward(self, dv: np.ndarray) -> None:
        g_ids, active_locals = self._cache
        self._cache = None
        c0, c1 = self._c0, self._c1
        doc, dtemb_out = self.conv_out.backward(dv)
        du2, de0 = doc[:, :c1], doc[:, c1:]
        demb_g_total = None
        demb_local_totals = [None] * len(active_locals)

        def acc(demb_g, demb_locals):
            nonlocal demb_g_total
            demb_g_total = demb_g if demb_g_total is None else demb_g_total + demb_g
            for i, d in enumerate(demb_locals):
                demb_local_totals[i] = d if demb_local_totals[i] is None else demb_local_totals[i] + d

        dtemb = dtemb_out

        def acc_t(d):
            nonlocal dtemb
            dtemb = d if dtemb is None else dtemb + d

        du2in, dt, dg, dl = self.up2.backward(du2)
        acc_t(dt); acc(dg, dl)
        du1, dd1 = du2in[:, :c1], du2in[:, c1:]
        du1in, dt, dg, dl = self.up1.backward(du1)
        acc_t(dt); acc(dg, dl)
        dm, dd2 = du1in[:, :c1], du1in[:, c1:]
        dmid, dt, dg, dl = self.mid.backward(dm)
        acc_t(dt); acc(dg, dl)
        dd2 = dd2 + dmid
        dd1b, dt, dg, dl = self.down2.backward(dd2)
        acc_t(dt); acc(dg, dl)
        dd1 = dd1 + dd1b
        de0b, dt, dg, dl = self.down1.backward(dd1)
        acc_t(dt); acc(dg, dl)
        de0 = de0 + de0b
        _dx_in, dt = self.conv_in.backward(de0)
        acc_t(dt)

        self.t_mlp1.backward(self.t_act.backward(self.t_mlp2.backward(dtemb)))

        dtable = np.zeros_like(self.token_table.data)
        np.add.at(dtable, g_ids, demb_g_total)
        for (ids, _), d in zip(active_locals, demb_local_totals):
            np.add.at(dtable, ids, d)
        self.token_table.add_grad(dtable)

    def predict(self, t, x_t, batch) -> np.ndarray:
        """training_step hook: train-mode forward from a DiffusionBatch."""
        return self.forward(t, x_t, batch.intrinsics, batch.reference, batch.masks,
                            batch.global_tokens, batch.local_tokens, batch.mode,
                            train=True)
