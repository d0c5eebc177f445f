"""Self-contained conceptual-scene construction.

Three steps: group training objects by yaw bin, keep the densest top-K%
per bin as conceptual models, then complete each observed object by pasting
its best-matching model (scaled to the object's box) and dropping pasted
points that duplicate observed ones. Also provides the paired cut-and-paste
augmentation that keeps a perceptual/conceptual scene pair aligned.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    Box3D,
    LabeledObject,
    PointCloud,
    PointGridIndex,
    avg_closest_point_distance,
    brute_nearest_sq_dists,
    rotated_bev_iou,
    wrap_angle,
)
from .scene_io import Scene

TWO_PI = 2.0 * math.pi


class CompletionStrategy(enum.Enum):
    ADD_WITH_REMOVAL = "add_with_removal"
    REPLACE = "replace"


@dataclass(frozen=True)
class ConstructionConfig:
    group_count: int = 24
    selection_percent: float = 20.0
    removal_radius: float = 0.25
    strategy: CompletionStrategy = CompletionStrategy.ADD_WITH_REMOVAL
    min_model_points: int = 5
    match_same_group_only: bool = False

    def __post_init__(self):
        if self.group_count < 1:
            raise ValueError("group_count must be >= 1")
        if not 0.0 < self.selection_percent <= 100.0:
            raise ValueError("selection_percent must be in (0, 100]")
        if self.removal_radius < 0.0:
            raise ValueError("removal_radius must be >= 0")


@dataclass(frozen=True)
class ConceptualModelBank:
    """Per-yaw-bin conceptual models, stored in object-local coordinates."""

    groups: tuple[tuple[LabeledObject, ...], ...]
    group_count: int
    selection_percent: float
    min_points: int = 5
    _index_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __len__(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def members(self) -> tuple[LabeledObject, ...]:
        return tuple(obj for group in self.groups for obj in group)

    def member_index(self, idx: int, member: LabeledObject) -> PointGridIndex | None:
        """Cached spatial index over member ``idx``'s points (None when tiny)."""
        if idx not in self._index_cache:
            xyz = member.interior_points.xyz
            self._index_cache[idx] = PointGridIndex(xyz) if len(xyz) >= 16 else None
        return self._index_cache[idx]


def yaw_bin(yaw: float, group_count: int) -> int:
    """Half-open uniform bins [-pi + k*2pi/M, -pi + (k+1)*2pi/M)."""
    k = int(math.floor((wrap_angle(yaw) + math.pi) / (TWO_PI / group_count)))
    return min(max(k, 0), group_count - 1)


def build_bank(objects, config: ConstructionConfig = ConstructionConfig()) -> ConceptualModelBank:
    """Select the ceil(K% * bin size) highest-point-count objects per yaw bin."""
    objects = list(objects)
    if not objects:
        warnings.warn("build_bank received no objects; bank is empty", stacklevel=2)
    bins: list[list[tuple[int, LabeledObject]]] = [[] for _ in range(config.group_count)]
    for idx, obj in enumerate(objects):
        bins[yaw_bin(obj.box.yaw, config.group_count)].append((idx, obj))
    groups = []
    for members in bins:
        take = math.ceil(config.selection_percent / 100.0 * len(members))
        ranked = sorted(members, key=lambda io: (-io[1].point_count, io[0]))
        eligible = [obj for _, obj in ranked if obj.point_count >= config.min_model_points]
        groups.append(tuple(eligible[:take]))
    return ConceptualModelBank(
        groups=tuple(groups),
        group_count=config.group_count,
        selection_percent=config.selection_percent,
        min_points=config.min_model_points,
    )


def match_model(
    obj: LabeledObject, bank: ConceptualModelBank, same_group_only: bool = False
) -> LabeledObject:
    """Bank member minimizing the object-to-candidate average closest-point
    distance, searched across all groups by default (local frames factor yaw
    out); ``same_group_only`` restricts the search to the object's yaw bin.

    Ties prefer the candidate with more points, then the lower bank index.
    """
    if len(bank) == 0:
        raise ValueError("cannot match against an empty bank")
    if obj.point_count == 0:
        raise ValueError("cannot match an object with no interior points")
    if same_group_only:
        group = yaw_bin(obj.box.yaw, bank.group_count)
        offset = sum(len(g) for g in bank.groups[:group])
        candidates = list(enumerate(bank.groups[group], start=offset))
        if not candidates:
            raise ValueError(f"bank group {group} has no models")
    else:
        candidates = list(enumerate(bank.members))
    best = None
    best_key = None
    for idx, cand in candidates:
        d = avg_closest_point_distance(
            obj.interior_points,
            cand.interior_points,
            dst_index=bank.member_index(idx, cand),
        )
        key = (d, -cand.point_count, idx)
        if best_key is None or key < best_key:
            best, best_key = cand, key
    return best


def _scaled_model_points(obj: LabeledObject, model: LabeledObject) -> np.ndarray:
    if min(model.box.l, model.box.w, model.box.h) <= 0.0:
        raise ValueError("model box has a zero dimension")
    # local axes: x spans l, y spans w, z spans h
    ratios = np.array(
        [obj.box.l / model.box.l, obj.box.w / model.box.w, obj.box.h / model.box.h, 1.0]
    )
    return model.interior_points.data * ratios


def complete_object(
    obj: LabeledObject, model: LabeledObject, config: ConstructionConfig
) -> PointCloud:
    """Object-local completed cloud: originals plus the scaled model points
    that do not duplicate an original (distance <= removal radius), or the
    scaled model points alone under the Replace strategy.
    """
    scaled = _scaled_model_points(obj, model)
    if config.strategy is CompletionStrategy.REPLACE:
        return PointCloud(scaled, frame_id=obj.interior_points.frame_id)
    original = obj.interior_points.data
    if len(original) == 0:
        keep = np.ones(len(scaled), dtype=bool)
    elif len(scaled) == 0:
        keep = np.zeros(0, dtype=bool)
    else:
        if len(original) >= 16:
            d2 = PointGridIndex(original[:, :3]).nearest_sq_dists(scaled[:, :3])
        else:
            d2 = brute_nearest_sq_dists(scaled[:, :3], original[:, :3])
        keep = d2 > config.removal_radius**2
    merged = np.concatenate([original, scaled[keep]], axis=0)
    return PointCloud(merged, frame_id=obj.interior_points.frame_id)


@dataclass
class ConstructionStats:
    completed: int = 0
    skipped: int = 0
    added_points: list[int] = field(default_factory=list)
    removed_points: list[int] = field(default_factory=list)

    def merge(self, other: "ConstructionStats") -> None:
        self.completed += other.completed
        self.skipped += other.skipped
        self.added_points.extend(other.added_points)
        self.removed_points.extend(other.removed_points)


def build_conceptual_scene(
    scene: Scene,
    bank: ConceptualModelBank,
    config: ConstructionConfig = ConstructionConfig(),
    stats: ConstructionStats | None = None,
) -> Scene:
    """Replace each object's interior with its completed counterpart.

    Background points are untouched; boxes and labels are preserved
    bit-exactly. Objects that cannot be matched or completed are kept as-is
    and counted in ``stats.skipped``.
    """
    stats = stats if stats is not None else ConstructionStats()
    new_objects = []
    for obj in scene.objects:
        try:
            model = match_model(obj, bank, same_group_only=config.match_same_group_only)
            completed = complete_object(obj, model, config)
        except ValueError:
            stats.skipped += 1
            new_objects.append(obj)
            continue
        stats.completed += 1
        if config.strategy is CompletionStrategy.ADD_WITH_REMOVAL:
            added = len(completed) - obj.point_count
            stats.added_points.append(added)
            stats.removed_points.append(model.point_count - added)
        new_objects.append(replace(obj, interior_points=completed))
    cloud = rebuild_scene_cloud(scene.cloud, scene.objects, new_objects)
    return Scene(scene.scene_id, cloud, tuple(new_objects))


def rebuild_scene_cloud(cloud: PointCloud, old_objects, new_objects) -> PointCloud:
    """Background points (outside every old box) followed by each new
    object's world points, in object order."""
    if not old_objects:
        return cloud
    inside = np.zeros(len(cloud), dtype=bool)
    for obj in old_objects:
        inside |= obj.box.contains(cloud.xyz)
    parts = [cloud.data[~inside]]
    parts.extend(obj.world_points().data for obj in new_objects)
    return PointCloud(np.concatenate(parts, axis=0), frame_id=cloud.frame_id)


def construction_report(bank: ConceptualModelBank, stats: ConstructionStats) -> dict:
    added = stats.added_points
    removed = stats.removed_points
    return {
        "group_sizes": [len(g) for g in bank.groups],
        "model_count": len(bank),
        "completed_objects": stats.completed,
        "skipped_objects": stats.skipped,
        "mean_added_points": float(np.mean(added)) if added else 0.0,
        "mean_removed_points": float(np.mean(removed)) if removed else 0.0,
    }


# ---------------------------------------------------------------------------
# Paired ground-truth sampling augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GtSampleDb:
    """Raw/completed object pairs harvested from training scenes."""

    samples: tuple[tuple[LabeledObject, LabeledObject], ...]

    def __len__(self) -> int:
        return len(self.samples)


def build_sample_db(
    scenes, bank: ConceptualModelBank, config: ConstructionConfig = ConstructionConfig()
) -> GtSampleDb:
    pairs = []
    for scene in scenes:
        for obj in scene.objects:
            try:
                model = match_model(obj, bank)
                completed = complete_object(obj, model, config)
            except ValueError:
                continue
            pairs.append((obj, replace(obj, interior_points=completed)))
    return GtSampleDb(tuple(pairs))


@dataclass(frozen=True)
class AugmentConfig:
    sample_count: int = 4
    flip_prob: float = 0.5
    rotation_range: tuple[float, float] = (-math.pi / 4.0, math.pi / 4.0)
    scale_range: tuple[float, float] = (0.95, 1.05)
    placement_retries: int = 20


def _flip_y_object(obj: LabeledObject) -> LabeledObject:
    b = obj.box
    box = Box3D(b.cx, -b.cy, b.cz, b.w, b.l, b.h, wrap_angle(-b.yaw))
    pts = obj.interior_points.data.copy()
    pts[:, 1] = -pts[:, 1]
    return replace(obj, box=box, interior_points=PointCloud(pts, obj.interior_points.frame_id))


def _rotate_object(obj: LabeledObject, phi: float) -> LabeledObject:
    b = obj.box
    c, s = math.cos(phi), math.sin(phi)
    cx = c * b.cx - s * b.cy
    cy = s * b.cx + c * b.cy
    box = Box3D(cx, cy, b.cz, b.w, b.l, b.h, wrap_angle(b.yaw + phi))
    return replace(obj, box=box)  # local points ride along with the frame


def _scale_object(obj: LabeledObject, s: float) -> LabeledObject:
    b = obj.box
    box = Box3D(b.cx * s, b.cy * s, b.cz * s, b.w * s, b.l * s, b.h * s, b.yaw)
    pts = obj.interior_points.data.copy()
    pts[:, :3] *= s
    return replace(obj, box=box, interior_points=PointCloud(pts, obj.interior_points.frame_id))


def _transform_cloud(xyz4: np.ndarray, flip: bool, phi: float, scale: float) -> np.ndarray:
    out = xyz4.copy()
    if flip:
        out[:, 1] = -out[:, 1]
    if phi != 0.0:
        c, s = math.cos(phi), math.sin(phi)
        x, y = out[:, 0].copy(), out[:, 1].copy()
        out[:, 0] = c * x - s * y
        out[:, 1] = s * x + c * y
    if scale != 1.0:
        out[:, :3] *= scale
    return out


def _reposed(obj: LabeledObject, phi: float) -> LabeledObject:
    """Rotate the sample's pose about the sensor origin by phi."""
    return _rotate_object(obj, phi)


def paired_augment(
    perceptual: Scene,
    conceptual: Scene,
    sampler_db: GtSampleDb,
    rng_seed: int,
    config: AugmentConfig = AugmentConfig(),
) -> tuple[Scene, Scene]:
    """Paste sampled objects then apply one global flip/rotate/scale, with
    identical random draws for both scenes so they stay spatially aligned.
    """
    if len(perceptual.objects) != len(conceptual.objects) or any(
        p.box != c.box for p, c in zip(perceptual.objects, conceptual.objects)
    ):
        raise ValueError("perceptual and conceptual scenes must share the box list")
    rng = np.random.default_rng(rng_seed)

    pasted: list[tuple[LabeledObject, LabeledObject]] = []
    k = min(config.sample_count, len(sampler_db))
    picks = rng.choice(len(sampler_db), size=k, replace=False) if k else []
    boxes = [obj.box for obj in perceptual.objects]
    for pick in picks:
        raw, completed = sampler_db.samples[int(pick)]
        for attempt in range(config.placement_retries):
            phi = 0.0 if attempt == 0 else float(rng.uniform(-math.pi, math.pi))
            cand_raw = _reposed(raw, phi) if phi else raw
            if all(rotated_bev_iou(cand_raw.box, b) == 0.0 for b in boxes):
                pasted.append((cand_raw, _reposed(completed, phi) if phi else completed))
                boxes.append(cand_raw.box)
                break

    # Global transform draws happen unconditionally to keep the stream fixed.
    flip = bool(rng.random() < config.flip_prob)
    phi = float(rng.uniform(*config.rotation_range))
    scale = float(rng.uniform(*config.scale_range))

    if not pasted and not flip and phi == 0.0 and scale == 1.0:
        return perceptual, conceptual

    def finish(scene: Scene, extra: list[LabeledObject]) -> Scene:
        objs = list(scene.objects) + extra
        if not objs:
            cloud = PointCloud(
                _transform_cloud(scene.cloud.data, flip, phi, scale),
                frame_id=scene.cloud.frame_id,
            )
            return Scene(scene.scene_id, cloud, ())
        inside = np.zeros(len(scene.cloud), dtype=bool)
        for obj in scene.objects:
            inside |= obj.box.contains(scene.cloud.xyz)
        background = _transform_cloud(scene.cloud.data[~inside], flip, phi, scale)
        out_objs = []
        for obj in objs:
            if flip:
                obj = _flip_y_object(obj)
            obj = _rotate_object(obj, phi)
            obj = _scale_object(obj, scale)
            out_objs.append(obj)
        parts = [background] + [o.world_points().data for o in out_objs]
        cloud = PointCloud(np.concatenate(parts, axis=0), frame_id=scene.cloud.frame_id)
        return Scene(scene.scene_id, cloud, tuple(out_objs))

    return (
        finish(perceptual, [raw for raw, _ in pasted]),
        finish(conceptual, [comp for _, comp in pasted]),
    )
