"""Regular-grid quantization, sparse voxel tensors, BEV occupancy maps,
and foreground masks.

Dense map layout is ``(C, H, W)`` with H indexing x cells (forward) and W
indexing y cells (left). Cell ``i`` covers ``[origin + i*step,
origin + (i+1)*step)``, so every point inside the crop quantizes to a valid
index.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, Point3, PointCloud, points_to_local
from .scene_io import DEFAULT_CROP, CropRange


@dataclass(frozen=True)
class GridConfig:
    """Voxel sizes over a crop; dims[i] = ceil(span / step)."""

    crop: CropRange
    step_x: float
    step_y: float
    step_z: float
    bev_downsample: int = 1

    def __post_init__(self):
        for name in ("step_x", "step_y", "step_z"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.bev_downsample < 1:
            raise ValueError("bev_downsample must be >= 1")
        dx, dy, _ = self.dims
        if dx % self.bev_downsample or dy % self.bev_downsample:
            raise ValueError(
                f"bev_downsample {self.bev_downsample} must divide dims ({dx}, {dy})"
            )

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.crop.x_min, self.crop.y_min, self.crop.z_min])

    @property
    def steps(self) -> np.ndarray:
        return np.array([self.step_x, self.step_y, self.step_z])

    @property
    def dims(self) -> tuple[int, int, int]:
        """(D_x, D_y, D_z) voxel counts."""
        spans = (
            (self.crop.x_max - self.crop.x_min) / self.step_x,
            (self.crop.y_max - self.crop.y_min) / self.step_y,
            (self.crop.z_max - self.crop.z_min) / self.step_z,
        )
        # guard against 16.000000000000004-style float noise inflating ceil
        return tuple(int(math.ceil(s - 1e-9)) for s in spans)

    @property
    def bev_shape(self) -> tuple[int, int]:
        """Feature-map resolution after downsampling: (H, W) = (D_x/ds, D_y/ds)."""
        dx, dy, _ = self.dims
        return dx // self.bev_downsample, dy // self.bev_downsample

    def bev_cell_centers(self) -> np.ndarray:
        """(H, W, 2) world xy coordinates of feature-resolution cell centers."""
        h, w = self.bev_shape
        sx = self.step_x * self.bev_downsample
        sy = self.step_y * self.bev_downsample
        xs = self.crop.x_min + (np.arange(h) + 0.5) * sx
        ys = self.crop.y_min + (np.arange(w) + 0.5) * sy
        out = np.empty((h, w, 2))
        out[:, :, 0] = xs[:, None]
        out[:, :, 1] = ys[None, :]
        return out


KITTI_GRID = GridConfig(DEFAULT_CROP, 0.05, 0.05, 0.1, bev_downsample=8)

DESK_CROP = CropRange(0.0, 8.0, -4.0, 4.0, -1.0, 3.0)
DESK_GRID = GridConfig(DESK_CROP, 0.5, 0.5, 0.5, bev_downsample=1)


def quantize(xyz: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Integer cell indices floor((c - origin) / step) for an (N, 3) array."""
    xyz = np.asarray(xyz, dtype=np.float64)
    return np.floor((xyz - grid.origin) / grid.steps).astype(np.int64)


def quantize_point(p: Point3, grid: GridConfig) -> tuple[int, int, int] | None:
    """Cell index of one point, or None when it falls outside the grid."""
    idx = quantize(np.array([[p.x, p.y, p.z]]), grid)[0]
    dims = grid.dims
    if any(idx[i] < 0 or idx[i] >= dims[i] for i in range(3)):
        return None
    return int(idx[0]), int(idx[1]), int(idx[2])


@dataclass(frozen=True)
class SparseVoxelTensor:
    """Occupied voxels; each holds the last point written to it."""

    entries: dict[tuple[int, int, int], Point3]
    config: GridConfig
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.entries)


def voxelize(cloud: PointCloud, grid: GridConfig) -> SparseVoxelTensor:
    """Quantize a cloud; colliding points resolve to the last one in input
    order, out-of-range points are dropped and counted."""
    entries: dict[tuple[int, int, int], Point3] = {}
    dropped = 0
    dims = grid.dims
    ids = quantize(cloud.xyz, grid)
    in_range = ((ids >= 0) & (ids < np.array(dims))).all(axis=1)
    for row, (ok, idx) in enumerate(zip(in_range, ids)):
        if not ok:
            dropped += 1
            continue
        entries[(int(idx[0]), int(idx[1]), int(idx[2]))] = cloud.point(row)
    return SparseVoxelTensor(entries, grid, dropped)


class MapRole(enum.Enum):
    OCCUPANCY = "occupancy"
    CLASS_PERCEPTUAL = "class_perceptual"
    CLASS_CONCEPTUAL = "class_conceptual"
    BOX_PERCEPTUAL = "box_perceptual"
    BOX_CONCEPTUAL = "box_conceptual"
    REWEIGHT = "reweight"


@dataclass(frozen=True)
class FeatureMap:
    """(C, H, W) float map tagged with its provenance role."""

    data: np.ndarray
    role: MapRole

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature map contains non-finite values")
        if self.role is MapRole.REWEIGHT and arr.size and arr.min() < 0.0:
            raise ValueError("reweight maps must be non-negative")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def bev_shape(self) -> tuple[int, int]:
        return self.data.shape[1:]


def require_role(fmap: FeatureMap, role: MapRole) -> np.ndarray:
    if fmap.role is not role:
        raise ValueError(f"expected a {role.value} map, got {fmap.role.value}")
    return fmap.data


@dataclass(frozen=True)
class BevMask:
    """Binary map at feature-map resolution."""

    grid: np.ndarray
    config: GridConfig

    def __post_init__(self):
        arr = np.asarray(self.grid)
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        if arr.ndim != 2 or arr.shape != self.config.bev_shape:
            raise ValueError(
                f"mask shape {arr.shape} does not match grid {self.config.bev_shape}"
            )
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "grid", arr)

    @property
    def count(self) -> int:
        return int(self.grid.sum())


def to_bev_occupancy(t: SparseVoxelTensor) -> FeatureMap:
    """One channel per z bin; 1 where any voxel max-pools into the cell."""
    h, w = t.config.bev_shape
    dz = t.config.dims[2]
    ds = t.config.bev_downsample
    out = np.zeros((dz, h, w))
    for (ix, iy, iz) in t.entries:
        out[iz, ix // ds, iy // ds] = 1.0
    return FeatureMap(out, MapRole.OCCUPANCY)


def bev_occupancy(cloud: PointCloud, grid: GridConfig) -> FeatureMap:
    return to_bev_occupancy(voxelize(cloud, grid))


def occupied_mask(occupancy: FeatureMap, grid: GridConfig) -> BevMask:
    """Cells whose column holds at least one point in any z bin."""
    data = require_role(occupancy, MapRole.OCCUPANCY)
    return BevMask(data.max(axis=0) > 0.0, grid)


def foreground_mask(boxes, grid: GridConfig) -> BevMask:
    """Cells (at feature resolution) whose centers fall inside any rotated
    box footprint; z is ignored."""
    h, w = grid.bev_shape
    mask = np.zeros((h, w), dtype=bool)
    for box in boxes:
        mask |= _footprint_cells(box, grid)
    return BevMask(mask, grid)


def _footprint_cells(box: Box3D, grid: GridConfig) -> np.ndarray:
    h, w = grid.bev_shape
    sx = grid.step_x * grid.bev_downsample
    sy = grid.step_y * grid.bev_downsample
    corners = box.footprint()
    x0 = max(int(math.floor((corners[:, 0].min() - grid.crop.x_min) / sx)), 0)
    x1 = min(int(math.floor((corners[:, 0].max() - grid.crop.x_min) / sx)) + 1, h)
    y0 = max(int(math.floor((corners[:, 1].min() - grid.crop.y_min) / sy)), 0)
    y1 = min(int(math.floor((corners[:, 1].max() - grid.crop.y_min) / sy)) + 1, w)
    mask = np.zeros((h, w), dtype=bool)
    if x0 >= x1 or y0 >= y1:
        return mask
    xs = grid.crop.x_min + (np.arange(x0, x1) + 0.5) * sx
    ys = grid.crop.y_min + (np.arange(y0, y1) + 0.5) * sy
    centers = np.empty(((x1 - x0) * (y1 - y0), 3))
    centers[:, 0] = np.repeat(xs, y1 - y0)
    centers[:, 1] = np.tile(ys, x1 - x0)
    centers[:, 2] = box.cz
    local = points_to_local(box, centers)
    inside = (np.abs(local[:, 0]) <= box.l / 2.0) & (np.abs(local[:, 1]) <= box.w / 2.0)
    mask[x0:x1, y0:y1] = inside.reshape(x1 - x0, y1 - y0)
    return mask
