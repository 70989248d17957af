"""Operational glue: run configuration, dataset generation, the training
loop, DDIM window sampling for plan execution, and evaluation.

Frames live in [0, 1] RGB on disk and in metrics; the diffusion variable is
the affine encoding 2x - 1 (decoded and clipped on output).
"""

from __future__ import annotations

import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio, scene as scene_mod
from .attention import INTERPOLATION, AttentionMode, interpolation_mode, keyframe_mode
from .crossattn import RegionMask
from .diffusion import (Adam, DiffusionBatch, MomentumSGD, NoiseSchedule,
                        ddim_step, ddim_timesteps, dropout_conditions, training_step)
from .errors import ConfigError, DataError, TrainingDivergenceError, TrappedCameraError
from .kernel import Rng, gaussian_noise
from .metrics import EvalReport, evaluate_frames
from .net import IntrinsicStack, ModelConfig, VideoDenoiser, pad_reference
from .sampler import SamplingPlan, build_schedule, execute, video_length


@dataclass
class RunConfig:
    """Flat run configuration; unknown JSON keys are rejected."""

    # model
    frames: int = 5
    height: int = 32
    width: int = 32
    base_channels: int = 32
    heads: int = 8
    levels: int = 3
    p_max: int = 4
    d_text: int = 32
    adapter_rank: int = 4
    temb_dim: int = 64
    # diffusion
    t_max: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 20
    # training
    optimizer: str = "momentum"  # momentum | adam
    lr: float = 5e-5
    momentum: float = 0.9
    grad_clip: float = 0.0  # 0 disables clipping
    lr_warmup: int = 0
    t_sample_min: int = 1
    train_steps: int = 400
    lr_decay: float = 0.5
    lr_decay_every: int = 0  # 0 disables decay
    dropout_rate: float = 0.5
    mask_prob: float = 0.5
    local_prompt_prob: float = 0.5
    global_prompt_prob: float = 0.5
    ref_dropout: float = 0.2
    checkpoint_every: int = 200
    # data
    data_dir: str = "data"
    scenes: int = 4
    frames_per_scene: int = 17
    seed: int = 0

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f.name: f.type for f in fields(RunConfig)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**d)

    @staticmethod
    def from_json(path) -> "RunConfig":
        return RunConfig.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(frames=self.frames, height=self.height, width=self.width,
                           base_channels=self.base_channels, heads=self.heads,
                           levels=self.levels, p_max=self.p_max,
                           vocab_size=vocab_size, d_text=self.d_text,
                           adapter_rank=self.adapter_rank, temb_dim=self.temb_dim)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.t_max, self.beta_start, self.beta_end)


def thread_count() -> int:
    """Worker cap from X2V_THREADS (defaults to the CPU count)."""
    env = os.environ.get("X2V_THREADS", "")
    if env.strip():
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"X2V_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ConfigError("X2V_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def encode_rgb(x: np.ndarray) -> np.ndarray:
    return (2.0 * x - 1.0).astype(np.float32)


def decode_rgb(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# Dataset generation

TRAJ_SEED_OFFSET = 1_000_003


def _scene_payload(seed: int, frames: int, h: int, w: int):
    """Render one scene; raises TrappedCameraError for hopeless seeds."""
    spec = scene_mod.generate_scene(seed)
    traj = scene_mod.sample_trajectory(spec, frames, Rng(seed + TRAJ_SEED_OFFSET), h, w)
    stacks, ids, depths, rgbs = [], [], [], []
    for pose in traj.poses:
        stack, obj_id, depth = scene_mod.render_intrinsics(spec, pose, h, w)
        stacks.append(stack)
        ids.append(obj_id)
        depths.append(depth.astype(np.float32))
        rgbs.append(scene_mod.shade(stack)[0])
    vocab = dataio.default_vocab()
    # objects worth masking: visible enough, largest first, at most 3
    totals = {}
    for oid in range(len(spec.objects)):
        px = sum(int((m == oid).sum()) for m in ids)
        seen = sum(1 for m in ids if (m == oid).any())
        if px >= 40 and seen >= frames // 2:
            totals[oid] = px
    maskable = sorted(totals, key=lambda k: -totals[k])[:3]
    objects = []
    for oid in maskable:
        color, material = scene_mod.describe_object(spec.objects[oid])
        objects.append({
            "id": int(oid),
            "words": [color, material],
            "tokens": dataio.token_ids([color, material], vocab),
        })
    meta = {
        "name": f"scene_{seed:05d}",
        "seed": int(seed),
        "frames": int(frames),
        "focal": traj.poses[0].focal,
        "global_words": [spec.lighting_word],
        "global_tokens": dataio.token_ids([spec.lighting_word], vocab),
        "objects": objects,
        "poses": [[float(p.position[0]), float(p.position[1]), float(p.position[2]),
                   float(p.yaw)] for p in traj.poses],
    }
    return meta, stacks, ids, depths, rgbs


def generate_dataset(config: RunConfig, out_dir) -> dict:
    """Write scenes, vocabulary, and manifest; returns the manifest.

    Trapped-camera seeds are skipped (recorded in the manifest) and further
    seeds are tried until `config.scenes` succeed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = dataio.default_vocab()
    dataio.write_vocab(out / "vocab.txt", vocab)
    h, w, frames = config.height, config.width, config.frames_per_scene
    target = config.scenes
    results = {}
    skipped = []

    def attempt(seed):
        try:
            return seed, _scene_payload(seed, frames, h, w)
        except TrappedCameraError:
            return seed, None

    pool = ThreadPoolExecutor(max_workers=thread_count())
    try:
        next_seed = config.seed
        while sum(1 for v in results.values() if v is not None) < target:
            batch = list(range(next_seed, next_seed + max(2, target)))
            next_seed = batch[-1] + 1
            for seed, payload in pool.map(attempt, batch):
                results[seed] = payload
    finally:
        pool.shutdown()

    scenes_meta = []
    for seed in sorted(results):
        payload = results[seed]
        if payload is None:
            skipped.append(seed)
            continue
        if len(scenes_meta) >= target:
            break
        meta, stacks, ids, depths, rgbs = payload
        scene_dir = out / meta["name"]
        scene_dir.mkdir(exist_ok=True)
        for i in range(len(stacks)):
            st = stacks[i]
            dataio.write_tensor(dataio.frame_path(scene_dir, i, "albedo"), st.albedo[0])
            dataio.write_tensor(dataio.frame_path(scene_dir, i, "normal"), st.normal[0])
            dataio.write_tensor(dataio.frame_path(scene_dir, i, "irradiance"), st.irradiance[0])
            dataio.write_tensor(dataio.frame_path(scene_dir, i, "roughness"), st.roughness[0])
            dataio.write_tensor(dataio.frame_path(scene_dir, i, "metallicity"), st.metallicity[0])
            dataio.write_tensor(dataio.frame_path(scene_dir, i, "rgb"), rgbs[i])
            dataio.write_tensor(dataio.frame_path(scene_dir, i, "objectid"), ids[i])
            dataio.write_tensor(dataio.frame_path(scene_dir, i, "depth"), depths[i])
        scenes_meta.append(meta)
    manifest = {
        "format": "x2v-dataset",
        "version": 1,
        "vocab": "vocab.txt",
        "height": h,
        "width": w,
        "frames_per_scene": frames,
        "scenes": scenes_meta,
        "skipped_seeds": skipped,
    }
    dataio.write_manifest(out / "manifest.json", manifest)
    return manifest


# --------------------------------------------------------------------------
# Dataset access


class SceneData:
    """All arrays of one scene, loaded into memory."""

    def __init__(self, dataset_dir, meta: dict, h: int, w: int):
        d = Path(dataset_dir) / meta["name"]
        frames = meta["frames"]
        load = dataio.read_tensor

        def stack(channel):
            return np.stack([load(dataio.frame_path(d, i, channel)) for i in range(frames)])

        self.meta = meta
        self.rgb = stack("rgb")
        self.intrinsics = IntrinsicStack(stack("albedo"), stack("normal"),
                                         stack("irradiance"), stack("roughness"),
                                         stack("metallicity"))
        self.object_id = stack("objectid")
        self.depth = stack("depth").astype(np.float64)
        self.poses = [scene_mod.CameraPose(np.array(p[:3]), p[3], meta["focal"])
                      for p in meta["poses"]]
        self.global_tokens = list(meta["global_tokens"])
        self.objects = {o["id"]: list(o["tokens"]) for o in meta["objects"]}
        self.h, self.w = h, w
        self._tracks: dict[int, list[RegionMask]] = {}

    @property
    def n_frames(self) -> int:
        return self.rgb.shape[0]

    def mask_track(self, object_id: int) -> list[RegionMask]:
        """Per-frame binary masks of one object (all-zero where unseen)."""
        track = self._tracks.get(object_id)
        if track is None:
            track = [RegionMask((m == object_id).astype(np.float32)) for m in self.object_id]
            self._tracks[object_id] = track
        return track

    def correspondences(self) -> list:
        out = []
        for i in range(self.n_frames - 1):
            out.append(scene_mod.correspondence(self.poses[i], self.poses[i + 1],
                                                self.depth[i], self.depth[i + 1],
                                                self.h, self.w))
        return out


def load_dataset(dataset_dir) -> tuple[dict, list[SceneData]]:
    dataset_dir = Path(dataset_dir)
    manifest = dataio.read_manifest(dataset_dir / "manifest.json")
    h, w = manifest["height"], manifest["width"]
    scenes = [SceneData(dataset_dir, meta, h, w) for meta in manifest["scenes"]]
    return manifest, scenes


# --------------------------------------------------------------------------
# Training


def _window_starts(frames: int, n: int, stride: int) -> list[int]:
    span = stride * (n - 1)
    return list(range(0, frames - span))


def enumerate_windows(frames: int, n: int, levels: int):
    """(mode, level, frame indices) windows available in a scene."""
    out = []
    top = (n - 1) ** (levels - 1)
    for a in _window_starts(frames, n, top):
        out.append(("keyframe", levels, [a + top * j for j in range(n)]))
    for level in range(1, levels):
        stride = (n - 1) ** (level - 1)
        for a in _window_starts(frames, n, stride):
            out.append(("interpolation", level, [a + stride * j for j in range(n)]))
    return out


def _masked_window_intrinsics(intr: IntrinsicStack, tracks: Sequence[Sequence[RegionMask]]):
    """Zero albedo/metallicity/roughness inside the per-frame mask union."""
    if not tracks:
        return intr
    n, (h, w) = intr.n_frames, intr.spatial
    union = np.zeros((n, 1, h, w), dtype=np.float32)
    for track in tracks:
        for i, m in enumerate(track):
            union[i, 0] = np.maximum(union[i, 0], m.grid)
    keep = 1.0 - union
    return IntrinsicStack(intr.albedo * keep, intr.normal, intr.irradiance,
                          intr.roughness * keep, intr.metallicity * keep,
                          dict(intr.availability))


def build_batch(data: SceneData, window: Sequence[int], mode: AttentionMode,
                config: RunConfig, schedule: NoiseSchedule, rng: Rng) -> DiffusionBatch:
    """Assemble one training window with dropout and masking augmentation."""
    idx = list(window)
    n = len(idx)
    x0 = encode_rgb(data.rgb[idx])
    eps = gaussian_noise(x0.shape, rng)
    t = int(rng.integers(config.t_sample_min, config.t_max + 1))
    intr = dropout_conditions(data.intrinsics.take(idx), config.dropout_rate, rng)

    masks: list[list[RegionMask]] = []
    local_tokens: list[Optional[list[int]]] = []
    maskable = sorted(data.objects)
    if maskable and rng.uniform() < config.mask_prob:
        count = int(rng.integers(1, min(len(maskable), config.p_max) + 1))
        first = int(rng.integers(0, len(maskable)))
        chosen = [maskable[(first + j) % len(maskable)] for j in range(count)]
        for oid in chosen:
            track = [data.mask_track(oid)[i] for i in idx]
            masks.append(track)
            with_prompt = rng.uniform() < config.local_prompt_prob
            local_tokens.append(data.objects[oid] if with_prompt else None)
        intr = _masked_window_intrinsics(intr, masks)

    global_tokens = data.global_tokens if rng.uniform() < config.global_prompt_prob else []

    if mode.kind == INTERPOLATION:
        r0, rn1 = x0[0], x0[n - 1]
        ref = pad_reference(r0, rn1, n, mode)
    else:
        drop_ref = rng.uniform() < config.ref_dropout
        r0 = np.zeros_like(x0[0]) if drop_ref else x0[0]
        ref = pad_reference(r0, None, n, mode)

    return DiffusionBatch(x0=x0, eps=eps, t=t, intrinsics=intr, reference=ref,
                          masks=masks, global_tokens=global_tokens,
                          local_tokens=local_tokens, mode=mode)


def make_optimizer(config: RunConfig, model: VideoDenoiser) -> MomentumSGD:
    params = list(model.named_params())
    clip = config.grad_clip or None
    if config.optimizer == "adam":
        return Adam(params, lr=config.lr, grad_clip=clip)
    if config.optimizer == "momentum":
        return MomentumSGD(params, lr=config.lr, momentum=config.momentum, grad_clip=clip)
    raise ConfigError(f"unknown optimizer {config.optimizer!r}")


def model_entries(model: VideoDenoiser, opt: Optional[MomentumSGD] = None) -> dict:
    entries = {name: p.data for name, p in model.named_params()}
    if opt is not None:
        for name, v in opt.state_entries().items():
            entries[f"opt/{name}"] = v
    return entries


def build_model(config: RunConfig, vocab_size: int, init_seed: int = 1) -> VideoDenoiser:
    model = VideoDenoiser(config.model_config(vocab_size), Rng(init_seed))
    model.schedule = config.schedule()
    return model


def load_model(checkpoint_path) -> tuple[RunConfig, VideoDenoiser, int]:
    cfg_dict, entries, step, _rng_state = dataio.load_checkpoint(checkpoint_path)
    config = RunConfig.from_dict(cfg_dict)
    vocab_size = entries["token_table"].shape[0]
    model = build_model(config, vocab_size)
    for name, p in model.named_params():
        if name not in entries:
            raise DataError(f"checkpoint missing tensor {name}")
        if entries[name].shape != p.data.shape:
            raise DataError(f"checkpoint tensor {name} has shape {entries[name].shape}, "
                            f"expected {p.data.shape}")
        p.data = entries[name].astype(np.float32)
    return config, model, step


def train_model(config: RunConfig, dataset_dir, out_dir,
                log_stream=None) -> tuple[VideoDenoiser, list[dict]]:
    """Seeded training over sampled windows with per-mode batches.

    Writes loss_log.csv and checkpoint.x2vc under out_dir; on divergence the
    last periodic checkpoint is retained and the error re-raised."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, scenes = load_dataset(dataset_dir)
    vocab = dataio.read_vocab(Path(dataset_dir) / manifest["vocab"])
    model = build_model(config, len(vocab), init_seed=config.seed + 1)
    schedule = model.schedule
    opt = make_optimizer(config, model)
    rng = Rng(config.seed)

    window_pool = {"keyframe": [], "interpolation": {}}
    for si, data in enumerate(scenes):
        for kind, level, idx in enumerate_windows(data.n_frames, config.frames, config.levels):
            if kind == "keyframe":
                window_pool["keyframe"].append((si, idx))
            else:
                window_pool["interpolation"].setdefault(level, []).append((si, idx))
    if not window_pool["keyframe"]:
        raise DataError(f"scenes too short for keyframe windows at levels={config.levels}")

    ckpt_path = out / "checkpoint.x2vc"
    losses: list[dict] = []
    log_path = out / "loss_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mode", "level", "loss"])
        for step in range(config.train_steps):
            use_interp = config.levels > 1 and rng.uniform() < 0.5
            if use_interp:
                level = int(rng.integers(1, config.levels))
                pool = window_pool["interpolation"][level]
                mode = interpolation_mode(level)
            else:
                level = config.levels
                pool = window_pool["keyframe"]
                mode = keyframe_mode()
            si, idx = pool[rng.integers(0, len(pool))]
            batch = build_batch(scenes[si], idx, mode, config, schedule, rng)
            lr = config.lr
            if config.lr_decay_every:
                lr *= config.lr_decay ** (step // config.lr_decay_every)
            if config.lr_warmup and step < config.lr_warmup:
                lr *= (step + 1) / config.lr_warmup
            opt.lr = lr
            try:
                loss = training_step(model, batch, opt)
            except TrainingDivergenceError:
                sys.stderr.write(f"error: training diverged at step {step}\n")
                raise
            row = {"step": step, "mode": mode.kind, "level": level, "loss": loss}
            losses.append(row)
            writer.writerow([step, mode.kind, level, f"{loss:.8f}"])
            if log_stream is not None and (step % 25 == 0 or step == config.train_steps - 1):
                log_stream.write(f"step {step} {mode.kind}/{level} loss {loss:.5f}\n")
                log_stream.flush()
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                dataio.save_checkpoint(ckpt_path, config.to_dict(),
                                       model_entries(model, opt), step + 1, rng.state())
    dataio.save_checkpoint(ckpt_path, config.to_dict(), model_entries(model, opt),
                           config.train_steps, rng.state())
    return model, losses


# --------------------------------------------------------------------------
# Sampling


@dataclass
class VideoConditions:
    """Per-frame conditioning for a whole video plus optional reference RGB.

    locals_ holds (token ids or None, per-frame RegionMask track); the same
    RegionMask objects feed both the input mask channels and the
    cross-attention masks."""

    intrinsics: IntrinsicStack
    global_tokens: list[int] = field(default_factory=list)
    locals_: list[tuple[Optional[list[int]], list[RegionMask]]] = field(default_factory=list)
    reference_rgb: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.intrinsics.n_frames

    def window(self, indices: Sequence[int]):
        intr = self.intrinsics.take(indices)
        masks = [[track[i] for i in indices] for _, track in self.locals_]
        tokens = [tok for tok, _ in self.locals_]
        return intr, masks, tokens


class NetWindowSampler:
    """20-step DDIM over one plan window through the denoiser."""

    def __init__(self, model: VideoDenoiser, ddim_steps: int = 20):
        if model.schedule is None:
            raise ConfigError("model has no schedule attached")
        self.model = model
        self.steps = ddim_steps

    def sample_window(self, call, window, references, conditions: VideoConditions, rng: Rng):
        n = len(window)
        intr, masks, local_tokens = conditions.window(list(window))
        h, w = intr.spatial
        mode = call.mode
        r0_rgb = references.get(window[0])
        r0 = encode_rgb(r0_rgb) if r0_rgb is not None else np.zeros((3, h, w), np.float32)
        rn1 = encode_rgb(references[window[-1]]) if mode.kind == INTERPOLATION else None
        ref = pad_reference(r0, rn1, n, mode)
        x = gaussian_noise((n, 3, h, w), rng)
        ts = ddim_timesteps(self.steps, self.model.schedule.t_max)
        for t, t_prev in zip(ts, ts[1:]):
            v = self.model.denoise(t, x, intr, ref, masks, conditions.global_tokens,
                                   local_tokens, mode)
            x = ddim_step(x, v, t, t_prev, self.model.schedule)
        return decode_rgb(x)


def conditions_from_scene(data: SceneData, length: Optional[int] = None,
                          reference: bool = True,
                          masked_ids: Sequence[int] = (),
                          with_prompts: bool = False) -> VideoConditions:
    """Full (or material-masked) intrinsics for the first `length` frames."""
    length = data.n_frames if length is None else length
    if length > data.n_frames:
        raise ConfigError(f"{length} frames requested, scene has {data.n_frames}")
    idx = list(range(length))
    intr = data.intrinsics.take(idx)
    locals_ = []
    if masked_ids:
        tracks = []
        for oid in masked_ids:
            if oid not in data.objects:
                raise ConfigError(f"object {oid} has no mask/prompt entry in the manifest")
            track = [data.mask_track(oid)[i] for i in idx]
            tracks.append(track)
            locals_.append((data.objects[oid] if with_prompts else None, track))
        intr = _masked_window_intrinsics(intr, tracks)
    return VideoConditions(intrinsics=intr, global_tokens=list(data.global_tokens),
                           locals_=locals_,
                           reference_rgb=data.rgb[0] if reference else None)


def sample_video(model: VideoDenoiser, conditions: VideoConditions, levels: int,
                 seed: int, ddim_steps: int = 20) -> tuple[np.ndarray, SamplingPlan]:
    n = model.config.frames
    plan = build_schedule(n, levels)
    if len(conditions) != plan.length:
        raise ConfigError(f"conditions cover {len(conditions)} frames, "
                          f"plan needs {plan.length} (= ({n}-1)^{levels}+1)")
    sampler = NetWindowSampler(model, ddim_steps)
    video = execute(plan, sampler, conditions, Rng(seed))
    return video, plan


def evaluate_video(frames: np.ndarray, data: SceneData,
                   length: Optional[int] = None) -> EvalReport:
    length = frames.shape[0] if length is None else length
    gt = data.rgb[:length]
    if frames.shape != gt.shape:
        raise ConfigError(f"frames {frames.shape} vs ground truth {gt.shape}")
    corr = data.correspondences()[:length - 1]
    return evaluate_frames(frames, gt, corr)
