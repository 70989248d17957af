"""Procedural toy interiors with exact ground truth.

Rooms are axis-aligned boxes containing non-overlapping box objects with
palette materials plus one window region whose albedo and irradiance are
zero. Rendering is a z-buffered face rasterizer over pinhole rays; shading
is an exact per-pixel function of the intrinsic channels, so the stored RGB
is bitwise reproducible from the G-buffer. Camera trajectories are
visibility-weighted random walks: 900 candidate positions on a 0.05 m ring,
colliding candidates excluded, the next position sampled with weight equal
to the squared count of visible objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .crossattn import RegionMask
from .errors import ConfigError, TrappedCameraError
from .kernel import Rng
from .net import IntrinsicStack

CAMERA_HEIGHT = 1.7
ROOM_HEIGHT = 2.8
STEP_LENGTH = 0.05
CANDIDATES = 900
CAMERA_MARGIN = 0.12
FOV_DEGREES = 70.0

# Fixed direction toward the light; shading must be derivable from the
# intrinsic channels alone, so this cannot vary per scene.
LIGHT_DIR = np.array([0.3, 0.2, 1.0], dtype=np.float64)
LIGHT_DIR /= np.linalg.norm(LIGHT_DIR)
SPEC_POWER = 8

# Object ids for room surfaces; objects take ids >= 0.
FLOOR_ID, CEILING_ID, WALL_ID, WINDOW_ID = -1, -2, -3, -10

COLORS = {
    "red": (0.80, 0.15, 0.15), "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.80), "yellow": (0.85, 0.80, 0.20),
    "white": (0.90, 0.90, 0.90), "black": (0.08, 0.08, 0.08),
    "orange": (0.90, 0.50, 0.15), "purple": (0.55, 0.20, 0.70),
}
MATERIALS = {  # name -> (roughness, metallicity)
    "wood": (0.80, 0.10), "metal": (0.20, 0.90), "plastic": (0.40, 0.00),
    "fabric": (0.95, 0.00), "glass": (0.10, 0.50), "stone": (0.70, 0.20),
}
LIGHTING = {  # name -> (ambient rgb, directional rgb)
    "bright": ((0.55, 0.55, 0.55), (0.75, 0.75, 0.75)),
    "dim": ((0.18, 0.18, 0.18), (0.30, 0.30, 0.30)),
    "warm": ((0.45, 0.38, 0.28), (0.65, 0.52, 0.38)),
    "cool": ((0.30, 0.36, 0.48), (0.42, 0.50, 0.68)),
}


@dataclass
class BoxObject:
    center: np.ndarray      # [3], meters; z is half the height
    size: np.ndarray        # [3], full extents
    albedo: tuple[float, float, float]
    roughness: float
    metallicity: float
    emissive: bool
    color_word: str
    material_word: str

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.size / 2.0

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.size / 2.0


@dataclass
class SceneSpec:
    seed: int
    room: tuple[float, float]                 # width (x), depth (y)
    objects: list[BoxObject]
    lighting_word: str
    ambient: tuple[float, float, float]
    directional: tuple[float, float, float]
    floor: tuple[str, str]                    # (color word, material word)
    wall: tuple[str, str]
    window_wall: int                          # 0: x=0, 1: x=W, 2: y=0, 3: y=D
    window_span: tuple[float, float]          # along the wall
    window_z: tuple[float, float]

    @property
    def center(self) -> np.ndarray:
        return np.array([self.room[0] / 2.0, self.room[1] / 2.0, CAMERA_HEIGHT])


@dataclass
class CameraPose:
    position: np.ndarray  # [3]; height fixed at eye level
    yaw: float
    focal: float          # pinhole focal length in pixels

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if abs(self.position[2] - CAMERA_HEIGHT) > 1e-9:
            raise ConfigError(f"camera height must be {CAMERA_HEIGHT}, got {self.position[2]}")

    @property
    def forward(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw), 0.0])

    @property
    def right(self) -> np.ndarray:
        return np.array([math.sin(self.yaw), -math.cos(self.yaw), 0.0])

    @property
    def up(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])


@dataclass
class Trajectory:
    poses: list[CameraPose]

    def __post_init__(self):
        for a, b in zip(self.poses, self.poses[1:]):
            d = float(np.linalg.norm(b.position - a.position))
            if d > STEP_LENGTH + 1e-6:
                raise ConfigError(f"step of {d} m exceeds {STEP_LENGTH}")

    def __len__(self) -> int:
        return len(self.poses)


def default_focal(w: int) -> float:
    return (w / 2.0) / math.tan(math.radians(FOV_DEGREES / 2.0))


# --------------------------------------------------------------------------
# Scene generation


def _boxes_overlap(lo_a, hi_a, lo_b, hi_b, gap: float) -> bool:
    return bool(np.all(lo_a - gap < hi_b) and np.all(lo_b - gap < hi_a))


def generate_scene(seed: int) -> SceneSpec:
    """Seeded procedural room: 3-12 non-overlapping boxes with palette
    materials, one emissive at most times none, and a window region."""
    rng = Rng(seed)
    width = 4.0 + 3.0 * rng.uniform()
    depth = 4.0 + 3.0 * rng.uniform()
    color_names = list(COLORS)
    material_names = list(MATERIALS)
    n_objects = int(rng.integers(3, 13))
    objects: list[BoxObject] = []
    margin = 0.45
    for _ in range(n_objects):
        placed = False
        for attempt in range(400):
            shrink = 0.5 if attempt >= 200 else 1.0
            size = np.array([
                (0.35 + 0.75 * rng.uniform()) * shrink,
                (0.35 + 0.75 * rng.uniform()) * shrink,
                0.3 + 1.7 * rng.uniform(),
            ])
            cx = margin + size[0] / 2.0 + rng.uniform() * (width - 2 * margin - size[0])
            cy = margin + size[1] / 2.0 + rng.uniform() * (depth - 2 * margin - size[1])
            center = np.array([cx, cy, size[2] / 2.0])
            lo, hi = center - size / 2.0, center + size / 2.0
            if any(_boxes_overlap(lo, hi, o.lo, o.hi, gap=0.35) for o in objects):
                continue
            color = color_names[rng.integers(0, len(color_names))]
            material = material_names[rng.integers(0, len(material_names))]
            rough, metal = MATERIALS[material]
            objects.append(BoxObject(center, size, COLORS[color], rough, metal,
                                     emissive=bool(rng.uniform() < 0.15),
                                     color_word=color, material_word=material))
            placed = True
            break
        if not placed and len(objects) >= 3:
            break
    lighting = list(LIGHTING)[rng.integers(0, len(LIGHTING))]
    ambient, directional = LIGHTING[lighting]
    floor = (color_names[rng.integers(0, len(color_names))],
             material_names[rng.integers(0, len(material_names))])
    wall = (color_names[rng.integers(0, len(color_names))], "plastic")
    window_wall = int(rng.integers(0, 4))
    wall_len = depth if window_wall < 2 else width
    span0 = 0.5 + rng.uniform() * (wall_len - 2.5)
    return SceneSpec(seed=seed, room=(width, depth), objects=objects,
                     lighting_word=lighting, ambient=ambient, directional=directional,
                     floor=floor, wall=wall, window_wall=window_wall,
                     window_span=(span0, span0 + 1.5), window_z=(1.0, 2.2))


def describe_object(obj: BoxObject) -> tuple[str, str]:
    """Exact palette words for an object's albedo and material."""
    return obj.color_word, obj.material_word


# --------------------------------------------------------------------------
# Collision and visibility


def _collides(scene: SceneSpec, positions: np.ndarray) -> np.ndarray:
    """positions [M, 3] -> bool [M]; margin from walls and boxes."""
    pos = np.atleast_2d(positions)
    width, depth = scene.room
    bad = (pos[:, 0] < CAMERA_MARGIN) | (pos[:, 0] > width - CAMERA_MARGIN) \
        | (pos[:, 1] < CAMERA_MARGIN) | (pos[:, 1] > depth - CAMERA_MARGIN)
    for obj in scene.objects:
        lo, hi = obj.lo, obj.hi
        inside_xy = (pos[:, 0] > lo[0] - CAMERA_MARGIN) & (pos[:, 0] < hi[0] + CAMERA_MARGIN) \
            & (pos[:, 1] > lo[1] - CAMERA_MARGIN) & (pos[:, 1] < hi[1] + CAMERA_MARGIN)
        tall_enough = hi[2] + CAMERA_MARGIN > CAMERA_HEIGHT
        if tall_enough:
            bad |= inside_xy
    return bad


def collision_free(scene: SceneSpec, position: np.ndarray) -> bool:
    return not bool(_collides(scene, position[None])[0])


def _segment_entry(origins: np.ndarray, targets: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab entry/exit parameters of segments origin->target vs one box.

    origins/targets [.., 3]; returns (entry, exit) along the segment
    parameter (0 at origin, 1 at target)."""
    d = targets - origins
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / d
        t1 = (hi - origins) / d
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # d == 0 on an axis: inside slab -> (-inf, inf), outside -> empty
    zero = d == 0.0
    if np.any(zero):
        inside = (origins >= lo) & (origins <= hi)
        tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def count_visible_batch(scene: SceneSpec, positions: np.ndarray, yaws: np.ndarray,
                        focal: float, h: int = 32, w: int = 32) -> np.ndarray:
    """Visible-object counts for M poses.

    Visible = the object's center projects inside the image and no other box
    is entered earlier along the camera->center ray."""
    pos = np.atleast_2d(positions).astype(np.float64)
    yaws = np.atleast_1d(yaws).astype(np.float64)
    m = pos.shape[0]
    k = len(scene.objects)
    if k == 0:
        return np.zeros(m, dtype=np.int64)
    centers = np.stack([o.center for o in scene.objects])  # [K, 3]
    fwd = np.stack([np.cos(yaws), np.sin(yaws), np.zeros(m)], axis=1)
    right = np.stack([np.sin(yaws), -np.cos(yaws), np.zeros(m)], axis=1)
    up = np.array([0.0, 0.0, 1.0])
    rel = centers[None, :, :] - pos[:, None, :]          # [M, K, 3]
    z = (rel * fwd[:, None, :]).sum(-1)
    x = (rel * right[:, None, :]).sum(-1)
    y = rel @ up
    with np.errstate(divide="ignore", invalid="ignore"):
        px = (w - 1) / 2.0 + focal * x / z
        py = (h - 1) / 2.0 - focal * y / z
    in_view = (z > 1e-9) & (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)

    # entry parameter of each box along each camera->center segment
    origins = np.broadcast_to(pos[:, None, None, :], (m, k, k, 3))
    targets = np.broadcast_to(centers[None, :, None, :], (m, k, k, 3))
    los = np.stack([o.lo for o in scene.objects])
    his = np.stack([o.hi for o in scene.objects])
    entry, exit_ = _segment_entry(origins, targets,
                                  los[None, None, :, :], his[None, None, :, :])
    own = np.arange(k)
    own_entry = entry[:, own, own]                        # [M, K]
    hits = (entry < exit_) & (entry > 0.0)                # box j crossed at all
    blocks = hits & (entry < own_entry[:, :, None])       # ... before reaching object i
    blocks[:, own, own] = False
    occluded = blocks.any(axis=2)
    return (in_view & ~occluded).sum(axis=1)


def count_visible(scene: SceneSpec, pose: CameraPose, h: int = 32, w: int = 32) -> int:
    return int(count_visible_batch(scene, pose.position[None],
                                   np.array([pose.yaw]), pose.focal, h, w)[0])


# --------------------------------------------------------------------------
# Trajectory sampling


def _look_yaw(scene: SceneSpec, position: np.ndarray, motion: Optional[np.ndarray]) -> float:
    """Yaw toward the room center, smoothed with the motion direction."""
    to_center = scene.center[:2] - position[:2]
    nc = np.linalg.norm(to_center)
    v = to_center / nc if nc > 1e-9 else np.array([1.0, 0.0])
    if motion is not None:
        nm = np.linalg.norm(motion[:2])
        if nm > 1e-9:
            v = 0.6 * v + 0.4 * motion[:2] / nm
    return math.atan2(v[1], v[0])


def candidate_ring(position: np.ndarray) -> np.ndarray:
    """900 evenly spaced candidates on the step-length circle."""
    ang = 2.0 * np.pi * np.arange(CANDIDATES) / CANDIDATES
    out = np.tile(position, (CANDIDATES, 1))
    out[:, 0] += STEP_LENGTH * np.cos(ang)
    out[:, 1] += STEP_LENGTH * np.sin(ang)
    return out


def next_pose(scene: SceneSpec, pose: CameraPose, rng: Rng,
              h: int = 32, w: int = 32) -> CameraPose:
    """Sample the next camera position with weights N_i^2 over the
    non-colliding candidates; all-zero counts fall back to uniform."""
    cands = candidate_ring(pose.position)
    ok = ~_collides(scene, cands)
    if not ok.any():
        raise TrappedCameraError(f"all {CANDIDATES} candidates collide at {pose.position[:2]}")
    survivors = cands[ok]
    yaws = np.array([_look_yaw(scene, p, p - pose.position) for p in survivors])
    counts = count_visible_batch(scene, survivors, yaws, pose.focal, h, w)
    idx = rng.choice_weighted((counts.astype(np.float64)) ** 2)
    return CameraPose(survivors[idx], float(yaws[idx]), pose.focal)


def start_pose(scene: SceneSpec, rng: Rng, focal: float) -> CameraPose:
    """Random corner or boundary midpoint, oriented at the room center."""
    width, depth = scene.room
    inset = 0.5
    anchors = [
        (inset, inset), (width - inset, inset), (width - inset, depth - inset),
        (inset, depth - inset), (width / 2, inset), (width - inset, depth / 2),
        (width / 2, depth - inset), (inset, depth / 2),
    ]
    first = rng.integers(0, len(anchors))
    for off in range(len(anchors)):
        x, y = anchors[(first + off) % len(anchors)]
        p = np.array([x, y, CAMERA_HEIGHT])
        if collision_free(scene, p):
            return CameraPose(p, _look_yaw(scene, p, None), focal)
    raise TrappedCameraError("no collision-free start anchor")


def sample_trajectory(scene: SceneSpec, frames: int, rng: Rng,
                      h: int = 32, w: int = 32, restarts: int = 10) -> Trajectory:
    if frames < 2:
        raise ConfigError("a trajectory needs at least 2 frames")
    focal = default_focal(w)
    for _ in range(restarts):
        try:
            poses = [start_pose(scene, rng, focal)]
            for _ in range(frames - 1):
                poses.append(next_pose(scene, poses[-1], rng, h, w))
            return Trajectory(poses)
        except TrappedCameraError:
            continue
    raise TrappedCameraError(f"trajectory generation failed after {restarts} restarts")


# --------------------------------------------------------------------------
# Rendering


def _face_list(scene: SceneSpec):
    """Faces as (axis, plane, sign, u_axis, ulo, uhi, v_axis, vlo, vhi,
    material index). Room surfaces first, then object boxes."""
    width, depth = scene.room
    faces = []
    mats = []

    def add(axis, c, sign, ua, ulo, uhi, va, vlo, vhi, mat):
        faces.append((axis, float(c), float(sign), ua, float(ulo), float(uhi),
                      va, float(vlo), float(vhi), len(mats)))
        mats.append(mat)

    def material(color_word, material_word, obj_id, emissive=False):
        rough, metal = MATERIALS[material_word]
        return (np.array(COLORS[color_word]), rough, metal, emissive, obj_id)

    add(2, 0.0, +1, 0, 0, width, 1, 0, depth, material(*scene.floor, FLOOR_ID))
    add(2, ROOM_HEIGHT, -1, 0, 0, width, 1, 0, depth, material("white", "plastic", CEILING_ID))
    wall_mat = material(*scene.wall, WALL_ID)
    add(0, 0.0, +1, 1, 0, depth, 2, 0, ROOM_HEIGHT, wall_mat)
    add(0, width, -1, 1, 0, depth, 2, 0, ROOM_HEIGHT, wall_mat)
    add(1, 0.0, +1, 0, 0, width, 2, 0, ROOM_HEIGHT, wall_mat)
    add(1, depth, -1, 0, 0, width, 2, 0, ROOM_HEIGHT, wall_mat)
    for oid, obj in enumerate(scene.objects):
        lo, hi = obj.lo, obj.hi
        m = (np.array(obj.albedo), obj.roughness, obj.metallicity, obj.emissive, oid)
        add(0, lo[0], -1, 1, lo[1], hi[1], 2, lo[2], hi[2], m)
        add(0, hi[0], +1, 1, lo[1], hi[1], 2, lo[2], hi[2], m)
        add(1, lo[1], -1, 0, lo[0], hi[0], 2, lo[2], hi[2], m)
        add(1, hi[1], +1, 0, lo[0], hi[0], 2, lo[2], hi[2], m)
        add(2, lo[2], -1, 0, lo[0], hi[0], 1, lo[1], hi[1], m)
        add(2, hi[2], +1, 0, lo[0], hi[0], 1, lo[1], hi[1], m)
    return faces, mats


def _window_face_index(scene: SceneSpec) -> int:
    return 2 + scene.window_wall  # order in _face_list


def pixel_rays(pose: CameraPose, h: int, w: int) -> np.ndarray:
    """Unnormalized ray directions [h, w, 3] with unit forward component, so
    the ray parameter equals z-depth."""
    rows = (h - 1) / 2.0 - np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64) - (w - 1) / 2.0
    a = cols / pose.focal
    b = rows / pose.focal
    return (pose.forward[None, None, :]
            + a[None, :, None] * pose.right[None, None, :]
            + b[:, None, None] * pose.up[None, None, :])


def render_intrinsics(scene: SceneSpec, pose: CameraPose, h: int, w: int):
    """Z-buffered rasterization of the scene's faces.

    Returns (IntrinsicStack with one frame, object-id map [h, w] int32,
    z-depth map [h, w] float64)."""
    faces, mats = _face_list(scene)
    rays = pixel_rays(pose, h, w)
    o = pose.position
    t_best = np.full((h, w), np.inf)
    face_idx = np.full((h, w), -1, dtype=np.int64)
    for fi, (axis, c, sign, ua, ulo, uhi, va, vlo, vhi, _mi) in enumerate(faces):
        d = rays[:, :, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (c - o[axis]) / d
        facing = d * sign < 0.0
        pu = o[ua] + t * rays[:, :, ua]
        pv = o[va] + t * rays[:, :, va]
        ok = facing & (t > 1e-9) & (t < t_best) \
            & (pu >= ulo) & (pu <= uhi) & (pv >= vlo) & (pv <= vhi)
        t_best = np.where(ok, t, t_best)
        face_idx = np.where(ok, fi, face_idx)

    albedo = np.zeros((h, w, 3))
    rough = np.ones((h, w))
    metal = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    emissive = np.zeros((h, w), dtype=bool)
    obj_id = np.full((h, w), WALL_ID, dtype=np.int32)
    for fi, (axis, c, sign, *_rest, mi) in enumerate(faces):
        sel = face_idx == fi
        if not sel.any():
            continue
        alb, rg, mt, em, oid = mats[mi]
        albedo[sel] = alb
        rough[sel] = rg
        metal[sel] = mt
        emissive[sel] = em
        obj_id[sel] = oid
        n = np.zeros(3)
        n[axis] = sign
        normal[sel] = n

    # window override on its wall
    wfi = _window_face_index(scene)
    axis = faces[wfi][0]
    span_axis = 1 if scene.window_wall < 2 else 0
    hit = o[None, None, :] + t_best[:, :, None] * rays
    in_window = (face_idx == wfi) \
        & (hit[:, :, span_axis] >= scene.window_span[0]) \
        & (hit[:, :, span_axis] <= scene.window_span[1]) \
        & (hit[:, :, 2] >= scene.window_z[0]) & (hit[:, :, 2] <= scene.window_z[1])
    albedo[in_window] = 0.0
    rough[in_window] = 1.0
    metal[in_window] = 0.0
    obj_id[in_window] = WINDOW_ID

    ndotl = np.maximum(0.0, normal @ LIGHT_DIR)
    irr = np.asarray(scene.ambient)[None, None, :] + ndotl[:, :, None] * np.asarray(scene.directional)[None, None, :]
    irr = np.where(emissive[:, :, None], 1.0, irr)
    irr[in_window] = 0.0

    def chan(x, c):
        return np.ascontiguousarray(x.reshape(1, h, w, c).transpose(0, 3, 1, 2)).astype(np.float32)

    stack = IntrinsicStack(
        albedo=chan(albedo, 3),
        normal=chan((normal + 1.0) / 2.0, 3),
        irradiance=chan(irr, 3),
        roughness=chan(rough[:, :, None], 1),
        metallicity=chan(metal[:, :, None], 1),
    )
    return stack, obj_id, t_best


def shade(intrinsics: IntrinsicStack) -> np.ndarray:
    """Exact RGB from intrinsics: albedo * irradiance plus a fixed specular
    highlight gated by metallicity * (1 - roughness); clamped to [0, 1]."""
    alb = intrinsics.albedo
    nrm = 2.0 * intrinsics.normal - 1.0
    irr = intrinsics.irradiance
    l = LIGHT_DIR.astype(np.float32)
    ndotl = nrm[:, 0] * float(l[0]) + nrm[:, 1] * float(l[1]) + nrm[:, 2] * float(l[2])
    ndotl = np.maximum(np.float32(0.0), ndotl)
    # SPEC_POWER exponent via explicit squarings: bit-identical between
    # scalar and vector float32 paths (np.power is not)
    spec = ndotl * ndotl
    spec = spec * spec
    spec = spec * spec
    gate = intrinsics.metallicity[:, 0] * (1.0 - intrinsics.roughness[:, 0])
    rgb = alb * irr + (gate * spec)[:, None, :, :]
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def object_masks(obj_id: np.ndarray, ids: Sequence[int]) -> list[RegionMask]:
    """Binary mask per object id; an id absent from the view is an error."""
    out = []
    for i in ids:
        grid = (obj_id == int(i)).astype(np.float32)
        if grid.sum() == 0:
            raise ConfigError(f"object id {i} not visible in this view")
        out.append(RegionMask(grid))
    return out


def mask_intrinsics(stack: IntrinsicStack, masks: Sequence[RegionMask]) -> IntrinsicStack:
    """Zero-fill albedo, metallicity, and roughness inside the mask union."""
    if not masks:
        return stack
    union = np.zeros_like(masks[0].grid)
    for m in masks:
        union = np.maximum(union, m.grid)
    keep = (1.0 - union)[None, None, :, :]
    return IntrinsicStack(
        albedo=stack.albedo * keep,
        normal=stack.normal,
        irradiance=stack.irradiance,
        roughness=stack.roughness * keep,
        metallicity=stack.metallicity * keep,
        availability=dict(stack.availability),
    )


# --------------------------------------------------------------------------
# Ground-truth reprojection


def reproject(pose_a: CameraPose, pose_b: CameraPose, depth_a: np.ndarray,
              h: int, w: int):
    """Map every pixel of frame a into frame b via exact geometry.

    Returns (coords [h, w, 2] as (px, py) in frame b, z [h, w] projected
    depth, in_bounds [h, w])."""
    rays = pixel_rays(pose_a, h, w)
    points = pose_a.position[None, None, :] + depth_a[:, :, None] * rays
    rel = points - pose_b.position[None, None, :]
    z = rel @ pose_b.forward
    x = rel @ pose_b.right
    y = rel @ pose_b.up
    with np.errstate(divide="ignore", invalid="ignore"):
        px = (w - 1) / 2.0 + pose_b.focal * x / z
        py = (h - 1) / 2.0 - pose_b.focal * y / z
    coords = np.stack([px, py], axis=-1)
    eps = 1e-6  # keep border pixels that land on the edge up to roundoff
    in_bounds = (z > 1e-9) & (px >= -eps) & (px <= w - 1 + eps) \
        & (py >= -eps) & (py <= h - 1 + eps)
    return coords, z, in_bounds


def correspondence(pose_a: CameraPose, pose_b: CameraPose, depth_a: np.ndarray,
                   depth_b: np.ndarray, h: int, w: int, depth_tol: float = 0.05):
    """(coords, valid) for warping frame b onto frame a's pixels; occluded
    and out-of-frame pixels are invalid (nearest-pixel depth test)."""
    coords, z, in_bounds = reproject(pose_a, pose_b, depth_a, h, w)
    valid = in_bounds.copy()
    cx = np.clip(np.rint(coords[:, :, 0]), 0, w - 1).astype(np.int64)
    cy = np.clip(np.rint(coords[:, :, 1]), 0, h - 1).astype(np.int64)
    seen = depth_b[cy, cx]
    valid &= np.abs(seen - z) <= depth_tol
    return coords.astype(np.float64), valid


def motion_stats(trajectory: Trajectory, scene: SceneSpec, h: int = 32, w: int = 32) -> float:
    """Mean per-pixel reprojection displacement (pixels) between consecutive
    frames, from exact depth and pose deltas."""
    if len(trajectory) < 2:
        raise ConfigError("motion stats need at least two frames")
    total, count = 0.0, 0
    depths = [render_intrinsics(scene, p, h, w)[2] for p in trajectory.poses]
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    for i in range(len(trajectory) - 1):
        coords, _z, ok = reproject(trajectory.poses[i], trajectory.poses[i + 1], depths[i], h, w)
        disp = np.sqrt((coords[:, :, 0] - cols) ** 2 + (coords[:, :, 1] - rows) ** 2)
        total += float(disp[ok].sum())
        count += int(ok.sum())
    return total / max(count, 1)
