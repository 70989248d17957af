"""Video denoiser: input assembly, prompts, shapes, init behavior."""

import numpy as np
import pytest

from x2v.attention import interpolation_mode, keyframe_mode
from x2v.crossattn import RegionMask
from x2v.errors import ConfigError, MissingReferenceError, ShapeError
from x2v.kernel import Rng
from x2v.net import (IntrinsicStack, ModelConfig, ReferenceArray, VideoDenoiser,
                     assemble_input, pad_reference)


def tiny_config(**kw):
    base = dict(frames=3, height=8, width=8, base_channels=8, heads=4, levels=2,
                p_max=2, vocab_size=7, d_text=8, adapter_rank=2, temb_dim=16)
    base.update(kw)
    return ModelConfig(**base)


def stack_for(rng, n, h, w, identical_frames=False):
    nrm = np.zeros((n, 3, h, w), np.float32)
    nrm[:, 2] = 1.0
    def u(c):
        if identical_frames:
            one = rng.uniform((1, c, h, w))
            return np.repeat(one, n, axis=0)
        return rng.uniform((n, c, h, w))
    return IntrinsicStack(u(3), (nrm + 1) / 2, u(3), u(1), u(1))


class TestModelConfig:
    def test_heads_must_cover_frames(self):
        with pytest.raises(ConfigError):
            tiny_config(frames=5, heads=4)

    def test_spatial_divisibility(self):
        with pytest.raises(ConfigError):
            tiny_config(height=10)

    def test_channel_budget(self):
        assert tiny_config(p_max=4).c_in == 21
        assert tiny_config(p_max=2).c_in == 19


class TestIntrinsicStack:
    def test_validate_ranges(self):
        s = stack_for(Rng(1), 2, 4, 4)
        s.validate()
        bad = stack_for(Rng(2), 2, 4, 4)
        bad.albedo[0, 0, 0, 0] = 1.5
        with pytest.raises(ShapeError):
            bad.validate()

    def test_unit_normals_checked_when_available(self):
        s = stack_for(Rng(3), 2, 4, 4)
        s.normal[0, :, 0, 0] = 0.9
        with pytest.raises(ShapeError):
            s.validate()
        dropped = s.with_dropped({"normal": True})
        dropped.validate()  # dropped channel exempt

    def test_with_dropped_zero_fills(self):
        s = stack_for(Rng(4), 2, 4, 4)
        out = s.with_dropped({"albedo": True})
        assert np.all(out.albedo == 0.0)
        assert not out.availability["albedo"]
        assert np.array_equal(out.roughness, s.roughness)


class TestPadReference:
    def test_keyframe_layout(self):
        r0 = Rng(5).normal((3, 4, 4))
        ref = pad_reference(r0, None, 5, keyframe_mode())
        assert np.array_equal(ref.frames[0], r0)
        assert np.all(ref.frames[1:] == 0.0)

    def test_interpolation_layout(self):
        rng = Rng(6)
        r0, r4 = rng.normal((3, 4, 4)), rng.normal((3, 4, 4))
        ref = pad_reference(r0, r4, 5, interpolation_mode(1))
        assert np.array_equal(ref.frames[0], r0)
        assert np.array_equal(ref.frames[4], r4)
        assert np.all(ref.frames[1:4] == 0.0)

    def test_degenerate_two_frame_interpolation(self):
        rng = Rng(7)
        r0, r1 = rng.normal((3, 4, 4)), rng.normal((3, 4, 4))
        ref = pad_reference(r0, r1, 2, interpolation_mode(1))
        assert np.array_equal(ref.frames, np.stack([r0, r1]))

    def test_mode_argument_mismatch(self):
        rng = Rng(8)
        r0 = rng.normal((3, 4, 4))
        with pytest.raises(MissingReferenceError):
            pad_reference(r0, None, 5, interpolation_mode(1))
        with pytest.raises(ConfigError):
            pad_reference(r0, r0, 5, keyframe_mode())

    def test_padding_invariant_enforced(self):
        frames = Rng(9).normal((4, 3, 4, 4))
        with pytest.raises(ConfigError):
            ReferenceArray(frames, keyframe_mode())


class TestAssembleInput:
    def test_channel_layout(self):
        rng = Rng(10)
        n, h, w = 3, 8, 8
        x_t = rng.normal((n, 3, h, w))
        intr = stack_for(rng, n, h, w)
        ref = pad_reference(rng.normal((3, h, w)), None, n, keyframe_mode())
        grid = np.zeros((h, w), np.float32)
        grid[:4] = 1.0
        track = [RegionMask(grid) for _ in range(n)]
        out = assemble_input(x_t, intr, ref, [track], p_max=4)
        assert out.shape == (n, 21, h, w)
        assert np.array_equal(out[:, 0:3], x_t)
        assert np.array_equal(out[:, 3:6], intr.albedo)
        assert np.array_equal(out[:, 6:9], intr.normal)
        assert np.array_equal(out[:, 9:12], intr.irradiance)
        assert np.array_equal(out[:, 12:13], intr.roughness)
        assert np.array_equal(out[:, 13:14], intr.metallicity)
        assert np.array_equal(out[:, 14:17], ref.frames)
        assert np.array_equal(out[0, 17], grid)
        assert np.all(out[:, 18:] == 0.0)  # absent mask tracks zero-filled

    def test_no_masks_zero_block(self):
        rng = Rng(11)
        n, h, w = 2, 4, 4
        x_t = rng.normal((n, 3, h, w))
        intr = stack_for(rng, n, h, w)
        ref = pad_reference(rng.normal((3, h, w)), None, n, keyframe_mode())
        out = assemble_input(x_t, intr, ref, [], p_max=4)
        assert np.all(out[:, 17:] == 0.0)

    def test_dropped_channel_rides_through_as_zeros(self):
        rng = Rng(12)
        n, h, w = 2, 4, 4
        x_t = rng.normal((n, 3, h, w))
        intr = stack_for(rng, n, h, w).with_dropped({"albedo": True})
        ref = pad_reference(rng.normal((3, h, w)), None, n, keyframe_mode())
        out = assemble_input(x_t, intr, ref, [], p_max=4)
        assert np.all(out[:, 3:6] == 0.0)

    def test_errors(self):
        rng = Rng(13)
        x_t = rng.normal((2, 3, 4, 4))
        intr = stack_for(rng, 2, 4, 4)
        ref = pad_reference(rng.normal((3, 4, 4)), None, 2, keyframe_mode())
        with pytest.raises(ConfigError):
            assemble_input(x_t, intr, ref, [[], [], []], p_max=2)
        small = stack_for(rng, 2, 8, 8)
        with pytest.raises(ShapeError):
            assemble_input(x_t, small, ref, [], p_max=2)


class TestPrompts:
    def setup_method(self):
        self.net = VideoDenoiser(tiny_config(), Rng(0))

    def test_same_ids_identical(self):
        a = self.net.embed_prompt([1, 3])
        b = self.net.embed_prompt([1, 3])
        assert np.array_equal(a.tokens, b.tokens)

    def test_empty_maps_to_null_row(self):
        emb = self.net.embed_prompt([])
        assert np.array_equal(emb.tokens, self.net.token_table.data[[0]])

    def test_distinct_ids_differ_at_init(self):
        a = self.net.embed_prompt([1])
        b = self.net.embed_prompt([2])
        assert not np.array_equal(a.tokens, b.tokens)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            self.net.embed_prompt([99])


class TestDenoise:
    def _inputs(self, identical_frames=False, zero_ref=True, mode=None, masks=None,
                locals_=None, seed=20):
        cfg = tiny_config()
        rng = Rng(seed)
        n, h, w = cfg.frames, cfg.height, cfg.width
        if identical_frames:
            x_t = np.repeat(rng.normal((1, 3, h, w)), n, axis=0)
        else:
            x_t = rng.normal((n, 3, h, w))
        intr = stack_for(rng, n, h, w, identical_frames)
        mode = mode or keyframe_mode()
        r0 = np.zeros((3, h, w), np.float32) if zero_ref else rng.normal((3, h, w))
        rn1 = rng.normal((3, h, w)) if mode.kind == "interpolation" else None
        ref = pad_reference(r0, rn1, n, mode)
        return cfg, x_t, intr, ref, (masks or []), locals_

    def test_output_shape_and_determinism(self):
        cfg, x_t, intr, ref, masks, _ = self._inputs()
        net = VideoDenoiser(cfg, Rng(1))
        a = net.denoise(250, x_t, intr, ref, masks, [2], None, keyframe_mode())
        b = net.denoise(250, x_t, intr, ref, masks, [2], None, keyframe_mode())
        assert a.shape == x_t.shape
        assert np.array_equal(a, b)

    def test_init_frame_independence(self):
        cfg, x_t, intr, ref, masks, _ = self._inputs(identical_frames=True)
        net = VideoDenoiser(cfg, Rng(2))
        out = net.denoise(77, x_t, intr, ref, masks, [1, 2], None, keyframe_mode())
        for i in range(1, cfg.frames):
            assert np.max(np.abs(out[i] - out[0])) <= 1e-6

    def test_mode_mismatch_rejected(self):
        cfg, x_t, intr, ref, masks, _ = self._inputs()
        net = VideoDenoiser(cfg, Rng(3))
        with pytest.raises(ConfigError):
            net.denoise(10, x_t, intr, ref, masks, [], None, interpolation_mode(1))

    def test_local_prompt_count_must_match_tracks(self):
        cfg, x_t, intr, ref, _, _ = self._inputs()
        net = VideoDenoiser(cfg, Rng(4))
        grid = np.zeros((cfg.height, cfg.width), np.float32)
        grid[:2] = 1.0
        track = [RegionMask(grid) for _ in range(cfg.frames)]
        with pytest.raises(ConfigError):
            net.denoise(10, x_t, intr, ref, [track], [], [[1], [2]], keyframe_mode())

    def test_mask_objects_single_source(self):
        """The mask channels and the cross-attention masks must come from the
        same RegionMask objects (downsampled copies are cached per object)."""
        cfg, x_t, intr, ref, _, _ = self._inputs()
        net = VideoDenoiser(cfg, Rng(5))
        grid = np.zeros((cfg.height, cfg.width), np.float32)
        grid[:4, :4] = 1.0
        track = [RegionMask(grid.copy()) for _ in range(cfg.frames)]
        net.denoise(10, x_t, intr, ref, [track], [], [[1]], keyframe_mode())
        for m in track:
            # denoise populated the per-layer cache of exactly these objects
            assert 2 in m._scaled and 4 in m._scaled
            assert m.at_factor(2) is m._scaled[2]

    def test_interpolation_mode_runs(self):
        mode = interpolation_mode(1)
        cfg, x_t, intr, ref, masks, _ = self._inputs(mode=mode, zero_ref=False)
        net = VideoDenoiser(cfg, Rng(6))
        out = net.denoise(40, x_t, intr, ref, masks, [], None, mode)
        assert out.shape == x_t.shape
