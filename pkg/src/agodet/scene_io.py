"""Dataset IO: velodyne binaries, KITTI-style labels and calibration,
range crops, and the binary scene/bank containers.

All float payloads are stored little-endian; parse errors raise
:class:`FormatError` with the file path and line (or byte offset).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .container import ContainerError, read_container, write_container
from .geometry import (
    Box3D,
    Category,
    Difficulty,
    LabeledObject,
    PointCloud,
    transform_to_local,
    wrap_angle,
)

SCENE_VERSION = 1
BANK_VERSION = 1

_CATEGORY_ORDER = (Category.CAR, Category.PEDESTRIAN, Category.CYCLIST, Category.OTHER)
_NAME_TO_CATEGORY = {
    "Car": Category.CAR,
    "Pedestrian": Category.PEDESTRIAN,
    "Cyclist": Category.CYCLIST,
    "Van": Category.OTHER,
    "Truck": Category.OTHER,
    "Person_sitting": Category.OTHER,
    "Tram": Category.OTHER,
    "Misc": Category.OTHER,
}
_CATEGORY_TO_NAME = {
    Category.CAR: "Car",
    Category.PEDESTRIAN: "Pedestrian",
    Category.CYCLIST: "Cyclist",
    Category.OTHER: "Misc",
}


class FormatError(ValueError):
    """Malformed dataset file; message carries path and location."""


# ---------------------------------------------------------------------------
# Range crop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropRange:
    """Axis-aligned keep region, open on every axis: (min, max).

    Boundary points are excluded so the kept set matches the open-interval
    reading of the range.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for axis in "xyz":
            lo, hi = getattr(self, f"{axis}_min"), getattr(self, f"{axis}_max")
            if not lo < hi:
                raise ValueError(f"crop {axis}_min must be < {axis}_max, got ({lo}, {hi})")

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        mask = np.ones(len(xyz), dtype=bool)
        for i, axis in enumerate("xyz"):
            lo, hi = getattr(self, f"{axis}_min"), getattr(self, f"{axis}_max")
            mask &= (xyz[:, i] > lo) & (xyz[:, i] < hi)
        return mask

    def contains_point(self, x: float, y: float, z: float) -> bool:
        return bool(self.contains(np.array([[x, y, z]]))[0])


DEFAULT_CROP = CropRange(0.0, 70.4, -40.0, 40.0, -3.0, 1.0)


def crop_cloud(cloud: PointCloud, crop: CropRange) -> PointCloud:
    mask = crop.contains(cloud.xyz)
    return PointCloud(cloud.data[mask], frame_id=cloud.frame_id)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

class Calibration:
    """Rigid sensor-to-camera mapping plus the rectifying rotation.

    ``velo_to_cam`` is a (3, 4) matrix, ``rect_rotation`` a (3, 3) rotation;
    cam = rect @ (R @ x + t). Rotation blocks must be orthonormal to 1e-4.
    """

    __slots__ = ("rect_rotation", "velo_to_cam", "_A", "_b", "_A_inv")

    def __init__(self, rect_rotation: np.ndarray, velo_to_cam: np.ndarray):
        rect = np.asarray(rect_rotation, dtype=np.float64)
        v2c = np.asarray(velo_to_cam, dtype=np.float64)
        if rect.shape != (3, 3):
            raise ValueError(f"rect_rotation must be (3, 3), got {rect.shape}")
        if v2c.shape != (3, 4):
            raise ValueError(f"velo_to_cam must be (3, 4), got {v2c.shape}")
        for name, rot in (("rect_rotation", rect), ("velo_to_cam", v2c[:, :3])):
            if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-4):
                raise ValueError(f"{name} rotation block is not orthonormal")
        rect = rect.copy()
        v2c = v2c.copy()
        rect.setflags(write=False)
        v2c.setflags(write=False)
        object.__setattr__(self, "rect_rotation", rect)
        object.__setattr__(self, "velo_to_cam", v2c)
        object.__setattr__(self, "_A", rect @ v2c[:, :3])
        object.__setattr__(self, "_b", rect @ v2c[:, 3])
        object.__setattr__(self, "_A_inv", np.linalg.inv(rect @ v2c[:, :3]))

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("Calibration is immutable")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Calibration)
            and np.array_equal(self.rect_rotation, other.rect_rotation)
            and np.array_equal(self.velo_to_cam, other.velo_to_cam)
        )

    @classmethod
    def identity(cls) -> "Calibration":
        """Canonical axis permutation: cam x = -y_lidar, cam y = -z_lidar,
        cam z = +x_lidar; no translation, no rectification."""
        v2c = np.array(
            [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]
        )
        return cls(np.eye(3), v2c)

    def lidar_to_cam(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self._A.T + self._b

    def cam_to_lidar(self, xyz: np.ndarray) -> np.ndarray:
        return (np.asarray(xyz, dtype=np.float64) - self._b) @ self._A_inv.T

    def lidar_yaw_from_ry(self, ry: float) -> float:
        d = self._A_inv @ np.array([math.cos(ry), 0.0, -math.sin(ry)])
        return wrap_angle(math.atan2(d[1], d[0]))

    def ry_from_lidar_yaw(self, yaw: float) -> float:
        d = self._A @ np.array([math.cos(yaw), math.sin(yaw), 0.0])
        return wrap_angle(math.atan2(-d[2], d[0]))

    def box_cam_to_lidar(self, location, dims_hwl, ry: float) -> Box3D:
        """KITTI camera-frame box (bottom-center location, h/w/l, ry) to a
        lidar-frame center box."""
        h, w, l = (float(v) for v in dims_hwl)
        x, y, z = (float(v) for v in location)
        center_cam = np.array([x, y - h / 2.0, z])
        cx, cy, cz = self.cam_to_lidar(center_cam[None])[0]
        return Box3D(float(cx), float(cy), float(cz), w=w, l=l, h=h,
                     yaw=self.lidar_yaw_from_ry(ry))

    def box_lidar_to_cam(self, box: Box3D) -> tuple[np.ndarray, tuple[float, float, float], float]:
        """Inverse of :meth:`box_cam_to_lidar`; returns (location, (h, w, l), ry)."""
        center_cam = self.lidar_to_cam(box.center[None])[0]
        location = center_cam + np.array([0.0, box.h / 2.0, 0.0])
        return location, (box.h, box.w, box.l), self.ry_from_lidar_yaw(box.yaw)


# ---------------------------------------------------------------------------
# Velodyne binaries
# ---------------------------------------------------------------------------

def read_velodyne(path) -> PointCloud:
    """Read a packed float32 x, y, z, intensity binary."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16 != 0:
        raise FormatError(
            f"{path}: byte length {len(raw)} is not a multiple of 16 "
            f"(truncated at offset {len(raw) - len(raw) % 16})"
        )
    pts = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(-1, 4)
    if pts.size and not np.isfinite(pts).all():
        bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
        raise FormatError(f"{path}: non-finite value in point {bad}")
    return PointCloud(pts, frame_id=path.stem)


def write_velodyne(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(cloud.data, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# KITTI calibration files
# ---------------------------------------------------------------------------

def read_kitti_calib(path) -> Calibration:
    """Parse ``KEY: floats`` lines; needs R0_rect (9) and Tr_velo_to_cam (12)."""
    path = Path(path)
    entries: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'KEY: values', got {line!r}")
        key, _, rest = line.partition(":")
        try:
            entries[key.strip()] = np.array([float(tok) for tok in rest.split()])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad float in {key.strip()!r}: {exc}") from None
    for key, count in (("R0_rect", 9), ("Tr_velo_to_cam", 12)):
        if key not in entries:
            raise FormatError(f"{path}: missing required key {key!r}")
        if entries[key].size != count:
            raise FormatError(
                f"{path}: key {key!r} has {entries[key].size} values, expected {count}"
            )
    try:
        return Calibration(entries["R0_rect"].reshape(3, 3),
                           entries["Tr_velo_to_cam"].reshape(3, 4))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_kitti_calib(calib: Calibration, path) -> None:
    def fmt(name, values):
        return name + ": " + " ".join(repr(float(v)) for v in np.ravel(values))

    lines = [
        fmt("P2", np.hstack([np.eye(3), np.zeros((3, 1))])),
        fmt("R0_rect", calib.rect_rotation),
        fmt("Tr_velo_to_cam", calib.velo_to_cam),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# KITTI label files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelRecord:
    """One parsed label/detection line in camera-frame conventions."""

    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dims_hwl: tuple[float, float, float]
    location: tuple[float, float, float]
    ry: float
    score: float | None = None

    @property
    def category(self) -> Category:
        return _NAME_TO_CATEGORY.get(self.type, Category.OTHER)

    @property
    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]


def parse_label_line(line: str, path="<string>", lineno: int = 0) -> LabelRecord:
    tokens = line.split()
    if len(tokens) not in (15, 16):
        raise FormatError(
            f"{path}:{lineno}: expected 15 or 16 fields, got {len(tokens)}"
        )
    try:
        vals = [float(tok) for tok in tokens[1:]]
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: bad float: {exc}") from None
    return LabelRecord(
        type=tokens[0],
        truncated=vals[0],
        occluded=int(vals[1]),
        alpha=vals[2],
        bbox=tuple(vals[3:7]),
        dims_hwl=tuple(vals[7:10]),
        location=tuple(vals[10:13]),
        ry=vals[13],
        score=vals[14] if len(vals) == 15 else None,
    )


def format_label_line(rec: LabelRecord) -> str:
    values = [
        rec.truncated, rec.occluded, rec.alpha, *rec.bbox,
        *rec.dims_hwl, *rec.location, rec.ry,
    ]
    if rec.score is not None:
        values.append(rec.score)
    return rec.type + " " + " ".join(f"{v:.6f}" for v in values)


def read_label_file(path) -> tuple[LabelRecord, ...]:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.strip():
            records.append(parse_label_line(line, path=str(path), lineno=lineno))
    return tuple(records)


def write_label_file(records, path) -> None:
    Path(path).write_text("".join(format_label_line(r) + "\n" for r in records))


def kitti_difficulty(bbox_height: float, occluded: int, truncated: float) -> Difficulty:
    if bbox_height >= 40.0 and occluded <= 0 and truncated <= 0.15:
        return Difficulty.EASY
    if bbox_height >= 25.0 and occluded <= 1 and truncated <= 0.30:
        return Difficulty.MOD
    if bbox_height >= 25.0 and occluded <= 2 and truncated <= 0.50:
        return Difficulty.HARD
    return Difficulty.UNKNOWN


# Inverse of kitti_difficulty, used when exporting objects to label files.
_DIFFICULTY_EXPORT = {
    Difficulty.EASY: (50.0, 0, 0.0),
    Difficulty.MOD: (30.0, 1, 0.20),
    Difficulty.HARD: (26.0, 2, 0.40),
    Difficulty.UNKNOWN: (20.0, 3, 0.90),
}


def record_from_object(
    obj: LabeledObject, calib: Calibration, score: float | None = None
) -> LabelRecord:
    location, dims_hwl, ry = calib.box_lidar_to_cam(obj.box)
    height, occluded, truncated = _DIFFICULTY_EXPORT[obj.difficulty]
    alpha = wrap_angle(ry - math.atan2(location[0], location[2]))
    return LabelRecord(
        type=_CATEGORY_TO_NAME[obj.category],
        truncated=truncated,
        occluded=occluded,
        alpha=alpha,
        bbox=(300.0, 150.0, 400.0, 150.0 + height),
        dims_hwl=tuple(float(v) for v in dims_hwl),
        location=tuple(float(v) for v in location),
        ry=ry,
        score=score,
    )


def object_from_record(rec: LabelRecord, calib: Calibration) -> LabeledObject:
    box = calib.box_cam_to_lidar(rec.location, rec.dims_hwl, rec.ry)
    return LabeledObject(
        box=box,
        category=rec.category,
        difficulty=kitti_difficulty(rec.bbox_height, rec.occluded, rec.truncated),
    )


@dataclass(frozen=True)
class LabelSet:
    objects: tuple[LabeledObject, ...]
    dont_care: tuple[tuple[float, float, float, float], ...]


def read_kitti_labels(path, calib: Calibration) -> LabelSet:
    """Parse a ground-truth label file into lidar-frame objects.

    DontCare entries carry no usable 3D pose; their 2D boxes are kept in a
    separate ignore list.
    """
    objects, dont_care = [], []
    for rec in read_label_file(path):
        if rec.type == "DontCare":
            dont_care.append(rec.bbox)
        else:
            objects.append(object_from_record(rec, calib))
    return LabelSet(tuple(objects), tuple(dont_care))


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scene:
    """A cropped cloud plus its labeled objects (interiors attached)."""

    scene_id: str
    cloud: PointCloud
    objects: tuple[LabeledObject, ...] = ()

    @property
    def boxes(self) -> list[Box3D]:
        return [obj.box for obj in self.objects]

    def validate(self, tol: float = 1e-6) -> None:
        for obj in self.objects:
            obj.validate(tol)


def attach_interior_points(cloud: PointCloud, objects, tol: float = 0.0):
    """Fill each object's interior cloud from the scene points it contains."""
    out = []
    for obj in objects:
        mask = obj.box.contains(cloud.xyz, tol=tol)
        inside = PointCloud(cloud.data[mask])
        out.append(replace(obj, interior_points=transform_to_local(obj.box, inside)))
    return tuple(out)


def crop_scene(scene: Scene, crop: CropRange) -> Scene:
    """Crop the cloud; objects whose centers leave the crop are dropped."""
    kept = tuple(
        obj for obj in scene.objects
        if crop.contains_point(obj.box.cx, obj.box.cy, obj.box.cz)
    )
    return Scene(scene.scene_id, crop_cloud(scene.cloud, crop), kept)


def load_kitti_scene(
    velodyne_path, label_path, calib_path, crop: CropRange | None = DEFAULT_CROP
) -> Scene:
    cloud = read_velodyne(velodyne_path)
    calib = read_kitti_calib(calib_path)
    labels = read_kitti_labels(label_path, calib)
    scene = Scene(Path(velodyne_path).stem, cloud, labels.objects)
    if crop is not None:
        scene = crop_scene(scene, crop)
    return Scene(scene.scene_id, scene.cloud,
                 attach_interior_points(scene.cloud, scene.objects))


# ---------------------------------------------------------------------------
# Binary scene / bank containers
# ---------------------------------------------------------------------------

def _pack_objects(objects) -> tuple[dict[str, bytes], list[str]]:
    boxes = np.array([o.box.as_array() for o in objects], dtype="<f8").reshape(-1, 7)
    cats = np.array([_CATEGORY_ORDER.index(o.category) for o in objects], dtype="u1")
    diffs = np.array([int(o.difficulty) for o in objects], dtype="u1")
    counts = np.array([o.point_count for o in objects], dtype="<u4")
    if objects:
        pts = np.concatenate([o.interior_points.data for o in objects], axis=0)
    else:
        pts = np.empty((0, 4))
    frames = [o.interior_points.frame_id for o in objects]
    return {
        "BOX": boxes.tobytes(),
        "CAT": cats.tobytes(),
        "DIF": diffs.tobytes(),
        "CNT": counts.tobytes(),
        "PTS": np.ascontiguousarray(pts, dtype="<f8").tobytes(),
    }, frames


def _unpack_objects(sections: dict[str, bytes], frames) -> tuple[LabeledObject, ...]:
    boxes = np.frombuffer(sections["BOX"], dtype="<f8").reshape(-1, 7)
    cats = np.frombuffer(sections["CAT"], dtype="u1")
    diffs = np.frombuffer(sections["DIF"], dtype="u1")
    counts = np.frombuffer(sections["CNT"], dtype="<u4")
    pts = np.frombuffer(sections["PTS"], dtype="<f8").reshape(-1, 4)
    out = []
    offset = 0
    for i in range(len(boxes)):
        n = int(counts[i])
        cloud = PointCloud(pts[offset : offset + n], frame_id=frames[i])
        offset += n
        out.append(
            LabeledObject(
                box=Box3D.from_array(boxes[i]),
                category=_CATEGORY_ORDER[int(cats[i])],
                interior_points=cloud,
                difficulty=Difficulty(int(diffs[i])),
            )
        )
    return tuple(out)


def save_scene(scene: Scene, path) -> None:
    meta = {
        "kind": "scene",
        "id": scene.scene_id,
        "cloud_frame": scene.cloud.frame_id,
        "object_frames": [o.interior_points.frame_id for o in scene.objects],
    }
    sections, _ = _pack_objects(scene.objects)
    sections["META"] = json.dumps(meta, sort_keys=True).encode()
    sections["CLOUD"] = np.ascontiguousarray(scene.cloud.data, dtype="<f8").tobytes()
    write_container(path, sections, version=SCENE_VERSION)


def load_scene(path) -> Scene:
    _, sections = read_container(path, expected_version=SCENE_VERSION)
    meta = json.loads(sections["META"].decode())
    if meta.get("kind") != "scene":
        raise ContainerError(f"{path}: not a scene container (kind={meta.get('kind')!r})")
    cloud = PointCloud(
        np.frombuffer(sections["CLOUD"], dtype="<f8").reshape(-1, 4),
        frame_id=meta["cloud_frame"],
    )
    objects = _unpack_objects(sections, meta["object_frames"])
    return Scene(meta["id"], cloud, objects)


def save_bank(bank, path) -> None:
    flat, groups = [], []
    for gi, group in enumerate(bank.groups):
        for obj in group:
            flat.append(obj)
            groups.append(gi)
    meta = {
        "kind": "bank",
        "group_count": bank.group_count,
        "selection_percent": bank.selection_percent,
        "min_points": bank.min_points,
        "object_frames": [o.interior_points.frame_id for o in flat],
    }
    sections, _ = _pack_objects(flat)
    sections["META"] = json.dumps(meta, sort_keys=True).encode()
    sections["GRP"] = np.array(groups, dtype="<u4").tobytes()
    write_container(path, sections, version=BANK_VERSION)


def load_bank(path):
    from .concept import ConceptualModelBank

    _, sections = read_container(path, expected_version=BANK_VERSION)
    meta = json.loads(sections["META"].decode())
    if meta.get("kind") != "bank":
        raise ContainerError(f"{path}: not a bank container (kind={meta.get('kind')!r})")
    flat = _unpack_objects(sections, meta["object_frames"])
    group_ids = np.frombuffer(sections["GRP"], dtype="<u4")
    groups: list[list[LabeledObject]] = [[] for _ in range(meta["group_count"])]
    for obj, gi in zip(flat, group_ids):
        groups[int(gi)].append(obj)
    return ConceptualModelBank(
        groups=tuple(tuple(g) for g in groups),
        group_count=meta["group_count"],
        selection_percent=meta["selection_percent"],
        min_points=meta["min_points"],
    )
