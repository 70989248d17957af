"""Scene simulator: generation invariants, visibility, trajectories,
rendering vs a per-pixel ray-casting oracle, exact shading."""

import math

import numpy as np
import pytest

from x2v.crossattn import RegionMask
from x2v.errors import ConfigError, TrappedCameraError
from x2v.kernel import Rng
from x2v.scene import (CAMERA_HEIGHT, LIGHT_DIR, STEP_LENGTH, WINDOW_ID,
                       CameraPose, SceneSpec, Trajectory, _face_list,
                       candidate_ring, collision_free, count_visible,
                       count_visible_batch, default_focal, generate_scene,
                       mask_intrinsics, motion_stats, next_pose, object_masks,
                       pixel_rays, render_intrinsics, reproject, sample_trajectory,
                       shade, start_pose)


def empty_room(width=6.0, depth=6.0, window_wall=3):
    return SceneSpec(seed=0, room=(width, depth), objects=[],
                     lighting_word="bright", ambient=(0.5, 0.5, 0.5),
                     directional=(0.7, 0.7, 0.7), floor=("white", "wood"),
                     wall=("white", "plastic"), window_wall=window_wall,
                     window_span=(2.0, 3.5), window_z=(1.0, 2.2))


class TestGenerateScene:
    def test_determinism(self):
        a, b = generate_scene(7), generate_scene(7)
        assert len(a.objects) == len(b.objects)
        for oa, ob in zip(a.objects, b.objects):
            assert np.array_equal(oa.center, ob.center)
            assert oa.albedo == ob.albedo

    def test_population_invariants(self):
        for seed in range(1000):
            s = generate_scene(seed)
            k = len(s.objects)
            assert 3 <= k <= 12
            for obj in s.objects:
                assert np.all(obj.lo[:2] >= 0.0) and obj.lo[2] >= 0.0
                assert obj.hi[0] <= s.room[0] and obj.hi[1] <= s.room[1]
                assert 0.0 <= obj.roughness <= 1.0 and 0.0 <= obj.metallicity <= 1.0
            # pairwise AABB oracle: open interval overlap on every axis
            for i in range(k):
                for j in range(i + 1, k):
                    a, b = s.objects[i], s.objects[j]
                    overlap = all(a.lo[ax] < b.hi[ax] and b.lo[ax] < a.hi[ax]
                                  for ax in range(3))
                    assert not overlap, f"seed {seed}: objects {i},{j} overlap"


class TestVisibility:
    def test_empty_view_counts_zero(self):
        scene = empty_room()
        scene.objects.append(_box((5.5, 5.5), (0.4, 0.4, 1.0)))
        pose = CameraPose(np.array([3.0, 0.6, CAMERA_HEIGHT]), -math.pi / 2, default_focal(32))
        assert count_visible(scene, pose) == 0

    def test_single_centered_object(self):
        scene = empty_room()
        scene.objects.append(_box((4.0, 3.0), (0.6, 0.6, 1.2)))
        pose = CameraPose(np.array([1.0, 3.0, CAMERA_HEIGHT]), 0.0, default_focal(32))
        assert count_visible(scene, pose) == 1

    def _march_oracle(self, scene, pose, h=32, w=32, steps=20000):
        count = 0
        fwd, right, up = pose.forward, pose.right, pose.up
        for oid, obj in enumerate(scene.objects):
            rel = obj.center - pose.position
            z = float(rel @ fwd)
            if z <= 1e-9:
                continue
            px = (w - 1) / 2.0 + pose.focal * float(rel @ right) / z
            py = (h - 1) / 2.0 - pose.focal * float(rel @ up) / z
            if not (0.0 <= px <= w - 1 and 0.0 <= py <= h - 1):
                continue
            ts = np.linspace(0.0, 1.0, steps + 1)[1:]
            points = pose.position[None] + ts[:, None] * rel[None]
            first_box = None
            for t_idx in range(len(ts)):
                p = points[t_idx]
                for k, other in enumerate(scene.objects):
                    if np.all(p >= other.lo) and np.all(p <= other.hi):
                        first_box = k
                        break
                if first_box is not None:
                    break
            if first_box == oid:
                count += 1
        return count

    def test_against_ray_march_oracle(self):
        rng = Rng(100)
        checked = 0
        for seed in range(20):
            scene = generate_scene(seed)
            for _ in range(5):
                pos = np.array([0.3 + rng.uniform() * (scene.room[0] - 0.6),
                                0.3 + rng.uniform() * (scene.room[1] - 0.6),
                                CAMERA_HEIGHT])
                if not collision_free(scene, pos):
                    continue
                pose = CameraPose(pos, rng.uniform() * 2 * math.pi, default_focal(32))
                assert count_visible(scene, pose) == self._march_oracle(scene, pose)
                checked += 1
        assert checked >= 50


def _box(center_xy, size, albedo=(0.8, 0.15, 0.15), rough=0.8, metal=0.1,
         emissive=False, color="red", material="wood"):
    from x2v.scene import BoxObject
    size = np.asarray(size, np.float64)
    center = np.array([center_xy[0], center_xy[1], size[2] / 2.0])
    return BoxObject(center, size, albedo, rough, metal, emissive, color, material)


class TestNextPose:
    def test_candidates_on_step_circle(self):
        pos = np.array([2.0, 3.0, CAMERA_HEIGHT])
        ring = candidate_ring(pos)
        assert ring.shape == (900, 3)
        d = np.linalg.norm(ring[:, :2] - pos[None, :2], axis=1)
        assert np.allclose(d, STEP_LENGTH, atol=1e-9)

    def test_trapped_camera(self):
        scene = empty_room(width=0.2, depth=0.2)
        pose = CameraPose(np.array([0.1, 0.1, CAMERA_HEIGHT]), 0.0, default_focal(32))
        with pytest.raises(TrappedCameraError):
            next_pose(scene, pose, Rng(1))

    def test_moves_by_step_and_stays_free(self):
        scene = generate_scene(3)
        pose = start_pose(scene, Rng(2), default_focal(32))
        rng = Rng(3)
        for _ in range(10):
            new = next_pose(scene, pose, rng)
            assert abs(np.linalg.norm(new.position - pose.position) - STEP_LENGTH) <= 1e-6
            assert collision_free(scene, new.position)
            pose = new


class TestTrajectory:
    def test_start_orientation_and_steps(self):
        scene = generate_scene(5)
        traj = sample_trajectory(scene, 12, Rng(7))
        p0 = traj.poses[0]
        to_center = scene.center[:2] - p0.position[:2]
        want = math.atan2(to_center[1], to_center[0])
        assert abs((p0.yaw - want + math.pi) % (2 * math.pi) - math.pi) <= 1e-6
        for a, b in zip(traj.poses, traj.poses[1:]):
            assert abs(np.linalg.norm(b.position - a.position) - STEP_LENGTH) <= 1e-6

    def test_no_collisions_along_paths(self):
        for seed in (0, 4, 9, 14):
            scene = generate_scene(seed)
            traj = sample_trajectory(scene, 10, Rng(seed + 50))
            for pose in traj.poses:
                assert collision_free(scene, pose.position)

    def test_trajectory_needs_two_frames(self):
        with pytest.raises(ConfigError):
            sample_trajectory(generate_scene(0), 1, Rng(0))

    def test_step_invariant_enforced(self):
        p0 = CameraPose(np.array([1.0, 1.0, CAMERA_HEIGHT]), 0.0, 20.0)
        p1 = CameraPose(np.array([1.5, 1.0, CAMERA_HEIGHT]), 0.0, 20.0)
        with pytest.raises(ConfigError):
            Trajectory([p0, p1])


class TestRender:
    def test_floor_normal_encoding(self):
        scene = empty_room()
        # look down the room; bottom rows hit the floor (+z normal)
        pose = CameraPose(np.array([0.5, 3.0, CAMERA_HEIGHT]), 0.0, default_focal(32))
        stack, obj_id, _depth = render_intrinsics(scene, pose, 32, 32)
        floor_px = obj_id == -1
        assert floor_px.any()
        nrm = stack.normal[0][:, floor_px]
        assert np.allclose(nrm, np.array([[0.5], [0.5], [1.0]]), atol=1e-7)

    def test_window_zeroes(self):
        scene = empty_room(window_wall=1)  # wall x = W
        pose = CameraPose(np.array([1.0, 2.75, CAMERA_HEIGHT]), 0.0, default_focal(32))
        stack, obj_id, _ = render_intrinsics(scene, pose, 32, 32)
        win = obj_id == WINDOW_ID
        assert win.any()
        assert np.all(stack.albedo[0][:, win] == 0.0)
        assert np.all(stack.irradiance[0][:, win] == 0.0)

    def _raycast_oracle(self, scene, pose, h, w):
        faces, mats = _face_list(scene)
        rays = pixel_rays(pose, h, w)
        o = pose.position
        t_best = np.full((h, w), np.inf)
        face_idx = np.full((h, w), -1)
        for r in range(h):
            for c in range(w):
                d = rays[r, c]
                for fi, (axis, pc, sign, ua, ulo, uhi, va, vlo, vhi, _mi) in enumerate(faces):
                    da = d[axis]
                    if da * sign >= 0.0 or da == 0.0:
                        continue
                    t = (pc - o[axis]) / da
                    if not (t > 1e-9 and t < t_best[r, c]):
                        continue
                    pu = o[ua] + t * d[ua]
                    pv = o[va] + t * d[va]
                    if ulo <= pu <= uhi and vlo <= pv <= vhi:
                        t_best[r, c] = t
                        face_idx[r, c] = fi
        return t_best, face_idx

    def test_matches_raycast_oracle_exactly(self):
        scene = generate_scene(11)
        traj = sample_trajectory(scene, 3, Rng(60))
        for pose in traj.poses[:2]:
            stack, obj_id, depth = render_intrinsics(scene, pose, 24, 24)
            t_oracle, _ = self._raycast_oracle(scene, pose, 24, 24)
            assert np.array_equal(depth, t_oracle)

    def test_validates(self):
        scene = generate_scene(13)
        pose = start_pose(scene, Rng(0), default_focal(32))
        stack, _, _ = render_intrinsics(scene, pose, 32, 32)
        stack.validate()


class TestShade:
    def test_black_scene(self):
        scene = empty_room()
        pose = CameraPose(np.array([1.0, 3.0, CAMERA_HEIGHT]), 0.0, default_focal(16))
        stack, _, _ = render_intrinsics(scene, pose, 16, 16)
        stack.albedo[:] = 0.0
        stack.metallicity[:] = 0.0
        assert np.all(shade(stack) == 0.0)

    def test_full_roughness_kills_specular(self):
        scene = generate_scene(17)
        pose = start_pose(scene, Rng(1), default_focal(16))
        stack, _, _ = render_intrinsics(scene, pose, 16, 16)
        stack.roughness[:] = 1.0
        got = shade(stack)
        diffuse = np.clip(stack.albedo * stack.irradiance, 0.0, 1.0)
        assert np.array_equal(got, diffuse.astype(np.float32))

    def test_pixelwise_formula_oracle_bitwise(self):
        scene = generate_scene(19)
        pose = start_pose(scene, Rng(2), default_focal(16))
        stack, _, _ = render_intrinsics(scene, pose, 16, 16)
        got = shade(stack)
        l = LIGHT_DIR.astype(np.float32)
        h, w = 16, 16
        want = np.zeros_like(got)
        for r in range(h):
            for c in range(w):
                n = 2.0 * stack.normal[0, :, r, c] - 1.0
                ndotl = max(np.float32(0.0), n[0] * l[0] + n[1] * l[1] + n[2] * l[2])
                s2 = ndotl * ndotl
                s4 = s2 * s2
                spec = s4 * s4
                gate = stack.metallicity[0, 0, r, c] * (np.float32(1.0) - stack.roughness[0, 0, r, c])
                rgb = stack.albedo[0, :, r, c] * stack.irradiance[0, :, r, c] + gate * spec
                want[0, :, r, c] = np.clip(rgb, 0.0, 1.0)
        assert np.array_equal(got, want)


class TestMasks:
    def test_union_partitions_frame(self):
        scene = generate_scene(23)
        pose = start_pose(scene, Rng(3), default_focal(32))
        _, obj_id, _ = render_intrinsics(scene, pose, 32, 32)
        visible = sorted(set(int(i) for i in np.unique(obj_id) if i >= 0))
        if not visible:
            pytest.skip("no object visible from the start anchor")
        masks = object_masks(obj_id, visible)
        union = np.zeros((32, 32), np.float32)
        for m in masks:
            union += m.grid
        background = (obj_id < 0).astype(np.float32)
        assert np.array_equal(union + background, np.ones((32, 32), np.float32))

    def test_absent_id_rejected(self):
        scene = generate_scene(23)
        pose = start_pose(scene, Rng(3), default_focal(32))
        _, obj_id, _ = render_intrinsics(scene, pose, 32, 32)
        with pytest.raises(ConfigError):
            object_masks(obj_id, [9999])

    def test_mask_intrinsics_zeroes_only_inside(self):
        scene = generate_scene(29)
        pose = start_pose(scene, Rng(4), default_focal(32))
        stack, obj_id, _ = render_intrinsics(scene, pose, 32, 32)
        visible = [int(i) for i in np.unique(obj_id) if i >= 0]
        if not visible:
            pytest.skip("no object visible")
        masks = object_masks(obj_id, visible[:1])
        out = mask_intrinsics(stack, masks)
        inside = masks[0].grid == 1.0
        outside = ~inside
        for name in ("albedo", "roughness", "metallicity"):
            assert np.all(getattr(out, name)[0][:, inside] == 0.0)
            assert np.array_equal(getattr(out, name)[0][:, outside],
                                  getattr(stack, name)[0][:, outside])
        assert np.array_equal(out.normal, stack.normal)
        assert np.array_equal(out.irradiance, stack.irradiance)


class TestMotionStats:
    def test_static_camera_zero(self):
        scene = empty_room()
        pose = CameraPose(np.array([2.0, 3.0, CAMERA_HEIGHT]), 0.0, default_focal(16))
        traj = Trajectory([pose, CameraPose(pose.position.copy(), 0.0, pose.focal)])
        assert motion_stats(traj, scene, 16, 16) <= 1e-9

    def test_fronto_parallel_wall_closed_form(self):
        scene = empty_room(width=6.0, depth=6.0, window_wall=0)
        f = default_focal(16)
        z0 = 1.0
        p0 = CameraPose(np.array([6.0 - z0, 3.0, CAMERA_HEIGHT]), 0.0, f)
        delta = STEP_LENGTH
        p1 = CameraPose(np.array([6.0 - z0 + delta, 3.0, CAMERA_HEIGHT]), 0.0, f)
        got = motion_stats(Trajectory([p0, p1]), scene, 16, 16)
        # every ray hits the wall at z-depth z0; pure radial zoom. Pixels that
        # reproject outside the frame are excluded, as in motion_stats.
        cols = np.broadcast_to(np.arange(16.0)[None, :], (16, 16))
        rows = np.broadcast_to(np.arange(16.0)[:, None], (16, 16))
        scalef = z0 / (z0 - delta)
        px = 7.5 + (cols - 7.5) * scalef
        py = 7.5 + (rows - 7.5) * scalef
        valid = (px >= 0) & (px <= 15) & (py >= 0) & (py <= 15)
        disp = np.sqrt((px - cols) ** 2 + (py - rows) ** 2)
        want = float(disp[valid].mean())
        assert abs(got - want) <= 1e-3

    def test_identity_reprojection(self):
        scene = generate_scene(31)
        pose = start_pose(scene, Rng(5), default_focal(16))
        _, _, depth = render_intrinsics(scene, pose, 16, 16)
        coords, _z, ok = reproject(pose, pose, depth, 16, 16)
        cols, rows = np.meshgrid(np.arange(16.0), np.arange(16.0))
        assert np.all(ok)
        assert np.allclose(coords[:, :, 0], cols, atol=1e-9)
        assert np.allclose(coords[:, :, 1], rows, atol=1e-9)
