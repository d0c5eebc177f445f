"""Synthetic desk-scale LiDAR scenes with known ground truth.

A single sensor at the origin edge emits points onto the sensor-facing faces
of boxes with surface density falling off as 1/r^2; other boxes cast hard
shadows via segment-box intersection, so far and occluded objects come out
naturally sparse. Ground clutter keeps background cells occupied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Box3D, Category, Difficulty, LabeledObject, PointCloud, rot_z, rotated_bev_iou
from .scene_io import CropRange, Scene, attach_interior_points, crop_scene
from .voxel import DESK_CROP


@dataclass(frozen=True)
class SyntheticSpec:
    train_scenes: int = 200
    val_scenes: int = 100
    min_objects: int = 2
    max_objects: int = 5
    base_density: float = 900.0  # expected points on an object at 1 m
    ground_points: float = 400.0
    noise_sigma: tuple[float, float, float] = (0.01, 0.01, 0.01)
    sensor_height: float = 2.0
    width_range: tuple[float, float] = (1.4, 1.8)
    length_range: tuple[float, float] = (3.4, 4.4)
    height_range: tuple[float, float] = (1.35, 1.75)
    yaw_range: tuple[float, float] = (-math.pi, math.pi)
    easy_min_points: int = 60
    mod_min_points: int = 25
    hard_min_points: int = 5
    crop: CropRange = DESK_CROP
    seed: int = 0

    def __post_init__(self):
        if self.base_density <= 0 or self.ground_points < 0:
            raise ValueError("densities must be positive")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")


def _sensor(spec: SyntheticSpec) -> np.ndarray:
    return np.array([0.0, 0.0, spec.sensor_height])


# local-frame face table: (axis, sign); x spans l, y spans w, z spans h
_FACES = ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0))


def _face_frame(box: Box3D, axis: int, sign: float):
    half = np.array([box.l, box.w, box.h]) / 2.0
    normal_local = np.zeros(3)
    normal_local[axis] = sign
    span_axes = [i for i in range(3) if i != axis]
    area = 4.0 * half[span_axes[0]] * half[span_axes[1]]
    return half, normal_local, span_axes, area


def _visible_faces(box: Box3D, sensor: np.ndarray):
    rot = rot_z(box.yaw)
    out = []
    for axis, sign in _FACES:
        half, n_local, span_axes, area = _face_frame(box, axis, sign)
        n_world = rot @ n_local
        face_center = box.center + rot @ (n_local * half[axis])
        if float(n_world @ (sensor - face_center)) > 0.0:
            out.append((axis, sign, span_axes, area, half))
    return out


def _sample_face(rng, box, axis, sign, span_axes, half, count):
    local = np.empty((count, 3))
    # sit the samples just under the surface so small noise keeps them inside
    local[:, axis] = sign * (half[axis] - rng.uniform(0.005, 0.05, size=count))
    for sa in span_axes:
        local[:, sa] = rng.uniform(-half[sa], half[sa], size=count)
    return local @ rot_z(box.yaw).T + box.center


def _segment_blocked(sensor: np.ndarray, pts: np.ndarray, box: Box3D) -> np.ndarray:
    """True where the sensor->point segment passes through the box."""
    rot = rot_z(box.yaw)
    sl = (sensor - box.center) @ rot
    pl = (pts - box.center) @ rot
    d = pl - sl
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    half = np.array([box.l, box.w, box.h]) / 2.0
    t1 = (-half - sl) / d
    t2 = (half - sl) / d
    t_enter = np.minimum(t1, t2).max(axis=1)
    t_exit = np.maximum(t1, t2).min(axis=1)
    return (t_enter <= t_exit) & (t_exit > 1e-6) & (t_enter < 1.0 - 1e-6)


def _shadow_mask(sensor, pts, boxes) -> np.ndarray:
    blocked = np.zeros(len(pts), dtype=bool)
    for box in boxes:
        blocked |= _segment_blocked(sensor, pts, box)
    return blocked


def _sample_object_points(rng, box: Box3D, others, spec: SyntheticSpec) -> np.ndarray:
    sensor = _sensor(spec)
    r = float(np.linalg.norm(box.center - sensor))
    n = int(rng.poisson(spec.base_density / max(r, 0.5) ** 2))
    faces = _visible_faces(box, sensor)
    if n == 0 or not faces:
        return np.empty((0, 4))
    weights = np.array([f[3] for f in faces])
    counts = rng.multinomial(n, weights / weights.sum())
    parts = []
    for (axis, sign, span_axes, _, half), cnt in zip(faces, counts):
        if cnt:
            parts.append(_sample_face(rng, box, axis, sign, span_axes, half, cnt))
    pts = np.concatenate(parts, axis=0) if parts else np.empty((0, 3))
    if len(pts) and others:
        pts = pts[~_shadow_mask(sensor, pts, others)]
    if len(pts) == 0:
        return np.empty((0, 4))
    pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
    out = np.empty((len(pts), 4))
    out[:, :3] = pts
    out[:, 3] = rng.uniform(0.2, 1.0, size=len(pts))
    return out


def _sample_ground(rng, boxes, spec: SyntheticSpec) -> np.ndarray:
    n = int(rng.poisson(spec.ground_points))
    if n == 0:
        return np.empty((0, 4))
    crop = spec.crop
    pts = np.empty((n, 3))
    pts[:, 0] = rng.uniform(crop.x_min + 0.2, crop.x_max - 0.2, size=n)
    pts[:, 1] = rng.uniform(crop.y_min + 0.2, crop.y_max - 0.2, size=n)
    pts[:, 2] = 0.0
    if boxes:
        pts = pts[~_shadow_mask(_sensor(spec), pts, boxes)]
    if len(pts) == 0:
        return np.empty((0, 4))
    pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
    out = np.empty((len(pts), 4))
    out[:, :3] = pts
    out[:, 3] = rng.uniform(0.2, 1.0, size=len(pts))
    return out


def _place_boxes(rng, spec: SyntheticSpec) -> list[Box3D]:
    crop = spec.crop
    want = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[Box3D] = []
    for _ in range(want):
        for _attempt in range(40):
            w = float(rng.uniform(*spec.width_range))
            l = float(rng.uniform(*spec.length_range))
            h = float(rng.uniform(*spec.height_range))
            yaw = float(rng.uniform(*spec.yaw_range))
            margin = l / 2.0 + 0.2
            cx = float(rng.uniform(crop.x_min + margin, crop.x_max - margin))
            cy = float(rng.uniform(crop.y_min + margin, crop.y_max - margin))
            cand = Box3D(cx, cy, h / 2.0, w, l, h, yaw)
            # keep a clearance band so boxes never visually touch
            inflated = Box3D(cx, cy, h / 2.0, w + 0.5, l + 0.5, h, yaw)
            if all(rotated_bev_iou(inflated, b) == 0.0 for b in boxes):
                boxes.append(cand)
                break
    return boxes


def _difficulty_from_count(count: int, spec: SyntheticSpec) -> Difficulty:
    if count >= spec.easy_min_points:
        return Difficulty.EASY
    if count >= spec.mod_min_points:
        return Difficulty.MOD
    if count >= spec.hard_min_points:
        return Difficulty.HARD
    return Difficulty.UNKNOWN


def generate_scene(spec: SyntheticSpec, scene_seed, scene_id: str) -> Scene:
    rng = np.random.default_rng(scene_seed)
    boxes = _place_boxes(rng, spec)
    parts = [_sample_ground(rng, boxes, spec)]
    for i, box in enumerate(boxes):
        others = [b for j, b in enumerate(boxes) if j != i]
        parts.append(_sample_object_points(rng, box, others, spec))
    cloud = PointCloud(np.concatenate(parts, axis=0), frame_id=scene_id)
    objects = tuple(LabeledObject(box=b, category=Category.CAR) for b in boxes)
    scene = crop_scene(Scene(scene_id, cloud, objects), spec.crop)
    attached = attach_interior_points(scene.cloud, scene.objects)
    final = tuple(
        replace(obj, difficulty=_difficulty_from_count(obj.point_count, spec))
        for obj in attached
    )
    return Scene(scene_id, scene.cloud, final)


def generate_dataset(spec: SyntheticSpec) -> tuple[list[Scene], list[Scene]]:
    """(train, val) scene lists; per-scene seeds come from one spawning
    sequence so each scene is independent of how many others exist."""
    total = spec.train_scenes + spec.val_scenes
    children = np.random.SeedSequence(spec.seed).spawn(total)
    scenes = [
        generate_scene(spec, child, f"{i:06d}")
        for i, child in enumerate(children)
    ]
    return scenes[: spec.train_scenes], scenes[spec.train_scenes :]
