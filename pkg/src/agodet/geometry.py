"""Points, oriented boxes, rigid transforms, and overlap metrics.

Conventions used throughout the package:

* right-handed LiDAR frame: x forward, y left, z up (meters);
* a box heading of 0 points along +x, the box length ``l`` spans the local
  x axis, the width ``w`` the local y axis, the height ``h`` the z axis;
* yaw angles are always wrapped into ``[-pi, pi)`` at construction time;
* clouds are immutable ``(N, 4)`` float64 arrays of ``x, y, z, intensity``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle into the canonical range [-pi, pi)."""
    return (theta + math.pi) % TWO_PI - math.pi


class Category(enum.Enum):
    CAR = "Car"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"
    OTHER = "Other"


class Difficulty(enum.IntEnum):
    EASY = 0
    MOD = 1
    HARD = 2
    UNKNOWN = 3


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float
    intensity: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.intensity], dtype=np.float64)


class PointCloud:
    """Immutable ordered set of 3D points with intensity.

    ``data`` is an (N, 4) float64 array; the backing buffer is made
    read-only so clouds can be shared freely between threads.
    """

    __slots__ = ("data", "frame_id")

    def __init__(self, data: np.ndarray | None = None, frame_id: str = ""):
        if data is None:
            data = np.empty((0, 4), dtype=np.float64)
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] not in (3, 4):
            raise ValueError(f"point array must be (N, 3) or (N, 4), got {arr.shape}")
        if arr.shape[1] == 3:
            arr = np.concatenate([arr, np.zeros((arr.shape[0], 1))], axis=1)
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("point cloud contains non-finite coordinates")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "frame_id", frame_id)

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("PointCloud is immutable")

    def __len__(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PointCloud)
            and self.frame_id == other.frame_id
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]

    def point(self, i: int) -> Point3:
        x, y, z, r = self.data[i]
        return Point3(float(x), float(y), float(z), float(r))

    @staticmethod
    def from_points(points, frame_id: str = "") -> "PointCloud":
        rows = [p.as_array() if isinstance(p, Point3) else np.asarray(p, dtype=np.float64) for p in points]
        if not rows:
            return PointCloud(frame_id=frame_id)
        return PointCloud(np.stack(rows), frame_id=frame_id)

    def with_frame_id(self, frame_id: str) -> "PointCloud":
        return PointCloud(self.data, frame_id=frame_id)


@dataclass(frozen=True)
class Box3D:
    """7-parameter gravity-aligned oriented box."""

    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("w", "l", "h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"box dimension {name} must be > 0")
        vals = (self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box parameters must be finite")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    @property
    def dims(self) -> np.ndarray:
        """(w, l, h)."""
        return np.array([self.w, self.l, self.h], dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    @property
    def z_bottom(self) -> float:
        return self.cz - self.h / 2.0

    @property
    def z_top(self) -> float:
        return self.cz + self.h / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw])

    @staticmethod
    def from_array(a) -> "Box3D":
        cx, cy, cz, w, l, h, yaw = (float(v) for v in a)
        return Box3D(cx, cy, cz, w, l, h, yaw)

    def footprint(self) -> np.ndarray:
        """BEV corners, CCW, shape (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def contains(self, xyz: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Boolean inclusion mask for an (N, 3) array of world points."""
        local = points_to_local(self, np.asarray(xyz, dtype=np.float64))
        return (
            (np.abs(local[:, 0]) <= self.l / 2.0 + tol)
            & (np.abs(local[:, 1]) <= self.w / 2.0 + tol)
            & (np.abs(local[:, 2]) <= self.h / 2.0 + tol)
        )


@dataclass(frozen=True)
class LabeledObject:
    """A ground-truth object: box, category, and its interior points.

    ``interior_points`` are stored in the object-local frame (box center at
    the origin, heading along +x).
    """

    box: Box3D
    category: Category = Category.CAR
    interior_points: PointCloud = field(default_factory=PointCloud)
    difficulty: Difficulty = Difficulty.UNKNOWN

    @property
    def point_count(self) -> int:
        return len(self.interior_points)

    def world_points(self) -> PointCloud:
        return transform_to_world(self.box, self.interior_points)

    def validate(self, tol: float = 1e-6) -> None:
        pts = self.interior_points.xyz
        if pts.size == 0:
            return
        half = np.array([self.box.l, self.box.w, self.box.h]) / 2.0
        if not (np.abs(pts) <= half + tol).all():
            raise ValueError("interior point outside the unit-posed box")


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def points_to_local(box: Box3D, xyz: np.ndarray) -> np.ndarray:
    """World (N, 3) coordinates -> box-local coordinates."""
    return (xyz - box.center) @ rot_z(box.yaw)  # R(-yaw) @ v == v @ R(yaw)


def points_to_world(box: Box3D, xyz: np.ndarray) -> np.ndarray:
    return xyz @ rot_z(box.yaw).T + box.center


def transform_to_local(box: Box3D, cloud: PointCloud) -> PointCloud:
    """Translate by -center then rotate by -yaw; empty clouds pass through."""
    if len(cloud) == 0:
        return cloud
    out = cloud.data.copy()
    out[:, :3] = points_to_local(box, cloud.xyz)
    return PointCloud(out, frame_id=cloud.frame_id)


def transform_to_world(box: Box3D, cloud: PointCloud) -> PointCloud:
    """Inverse of :func:`transform_to_local`."""
    if len(cloud) == 0:
        return cloud
    out = cloud.data.copy()
    out[:, :3] = points_to_world(box, cloud.xyz)
    return PointCloud(out, frame_id=cloud.frame_id)


# ---------------------------------------------------------------------------
# Rectangle overlap metrics
# ---------------------------------------------------------------------------

def _snapped_half_extents(box: Box3D) -> tuple[float, float]:
    """Half extents along x/y after snapping yaw to the nearest multiple of pi/2."""
    k = int(round(box.yaw / (math.pi / 2.0)))
    if k % 2 == 0:
        return box.l / 2.0, box.w / 2.0
    return box.w / 2.0, box.l / 2.0


def bev_rect_iou(a: Box3D, b: Box3D) -> float:
    """Axis-aligned IoU of the nearest horizontal rectangles in BEV."""
    ax, ay = _snapped_half_extents(a)
    bx, by = _snapped_half_extents(b)
    ix = min(a.cx + ax, b.cx + bx) - max(a.cx - ax, b.cx - bx)
    iy = min(a.cy + ay, b.cy + by) - max(a.cy - ay, b.cy - by)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = 4.0 * ax * ay + 4.0 * bx * by - inter
    return inter / union


_CLIP_EPS = 1e-12


def polygon_area(poly: np.ndarray) -> float:
    """Absolute area of a simple polygon, shoelace formula."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by a convex CCW ``clipper``."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= -_CLIP_EPS:
                if prev_side < -_CLIP_EPS:
                    output.append(_edge_intersection(prev, cur, (ax, ay), (bx, by)))
                output.append(cur)
            elif prev_side >= -_CLIP_EPS:
                output.append(_edge_intersection(prev, cur, (ax, ay), (bx, by)))
            prev, prev_side = cur, cur_side
    return np.array(output) if output else np.empty((0, 2))


def _edge_intersection(p, q, a, b):
    dpx, dpy = q[0] - p[0], q[1] - p[1]
    dex, dey = b[0] - a[0], b[1] - a[1]
    denom = dpx * dey - dpy * dex
    if abs(denom) < _CLIP_EPS:
        return q
    t = ((a[0] - p[0]) * dey - (a[1] - p[1]) * dex) / denom
    return (p[0] + t * dpx, p[1] + t * dpy)


def _ccw(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    signed = 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return poly if signed >= 0 else poly[::-1]


def footprint_intersection_area(a: Box3D, b: Box3D) -> float:
    # Clipping order perturbs the last ulp; fix a canonical order so the
    # result is bit-identical under argument swap.
    if (a.cx, a.cy, a.yaw, a.w, a.l) > (b.cx, b.cy, b.yaw, b.w, b.l):
        a, b = b, a
    inter = clip_polygon(_ccw(a.footprint()), _ccw(b.footprint()))
    return polygon_area(inter)


def rotated_bev_iou(a: Box3D, b: Box3D) -> float:
    """Exact rotated-rectangle IoU in BEV via convex polygon clipping."""
    inter = footprint_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.w * a.l + b.w * b.l - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: rotated BEV intersection times vertical overlap."""
    zi = min(a.z_top, b.z_top) - max(a.z_bottom, b.z_bottom)
    if zi <= 0.0:
        return 0.0
    inter = footprint_intersection_area(a, b) * zi
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(inter / union, 1.0)


def iou_matrix(boxes_a, boxes_b, metric: str = "bev") -> np.ndarray:
    """Pairwise IoU table; ``metric`` is one of ``bev``, ``3d``, ``rect``."""
    fn = {"bev": rotated_bev_iou, "3d": iou_3d, "rect": bev_rect_iou}[metric]
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out


# ---------------------------------------------------------------------------
# Nearest-neighbor queries on a uniform grid
# ---------------------------------------------------------------------------

def _pair_sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    # One fixed expression shared by the index and the brute-force path so
    # both produce bit-identical distances.
    dx = points[:, 0] - q[0]
    dy = points[:, 1] - q[1]
    dz = points[:, 2] - q[2]
    return dx * dx + dy * dy + dz * dz


def _median_nn_estimate(xyz: np.ndarray, sample: int = 64) -> float:
    n = len(xyz)
    if n < 2:
        return 1.0
    idx = np.unique(np.linspace(0, n - 1, min(sample, n)).astype(int))
    dists = []
    for i in idx:
        d2 = _pair_sq_dist(xyz, xyz[i])
        d2[i] = np.inf
        dists.append(math.sqrt(float(d2.min())))
    med = float(np.median(dists))
    if med > 0.0:
        return med
    span = float(np.linalg.norm(xyz.max(axis=0) - xyz.min(axis=0)))
    return span / max(n, 1) ** (1.0 / 3.0) if span > 0 else 1.0


_RING_OFFSETS: dict[tuple[int, int], np.ndarray] = {}

# Queries typically come from a sparser cloud than the indexed one, so a
# cell a few NN-spacings wide needs fewer ring expansions per query.
_CELL_SCALE = 3.0


def _ring_offsets(k_lo: int, k_hi: int) -> np.ndarray:
    """Integer cell offsets with Chebyshev distance in [k_lo, k_hi], (R, 3)."""
    key = (k_lo, k_hi)
    if key not in _RING_OFFSETS:
        r = np.arange(-k_hi, k_hi + 1)
        gx, gy, gz = np.meshgrid(r, r, r, indexing="ij")
        off = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
        cheb = np.abs(off).max(axis=1)
        _RING_OFFSETS[key] = off[(cheb >= k_lo) & (cheb <= k_hi)]
    return _RING_OFFSETS[key]


class PointGridIndex:
    """Uniform-grid spatial index over a fixed point set.

    Cell size defaults to the median nearest-neighbor distance estimate of
    the indexed cloud, which keeps expected ring searches O(1) on
    LiDAR-like densities. Buckets are stored as spans into one argsort
    permutation so batched queries stay in numpy.
    """

    def __init__(self, xyz: np.ndarray, cell_size: float | None = None):
        xyz = np.asarray(xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3 or len(xyz) == 0:
            raise ValueError("index requires a non-empty (N, 3) array")
        self.points = xyz
        self.cell = float(cell_size) if cell_size else _CELL_SCALE * _median_nn_estimate(xyz)
        while True:
            coords = np.floor(xyz / self.cell).astype(np.int64)
            self.cmin = coords.min(axis=0)
            self.cmax = coords.max(axis=0)
            self._dims = self.cmax - self.cmin + 1
            if int(np.prod(self._dims.astype(object))) < 2**62:
                break
            self.cell *= 2.0  # keep linearized cell keys inside int64
        keys = self._linear(coords)
        self._order = np.argsort(keys, kind="stable")
        sorted_keys = keys[self._order]
        self._ukeys, starts = np.unique(sorted_keys, return_index=True)
        self._starts = starts
        self._counts = np.diff(np.append(starts, len(sorted_keys)))

    def _linear(self, coords: np.ndarray) -> np.ndarray:
        s = coords - self.cmin
        return (s[..., 0] * self._dims[1] + s[..., 1]) * self._dims[2] + s[..., 2]

    def nearest_sq_dist(self, q: np.ndarray) -> float:
        """Squared distance from ``q`` to its nearest indexed point."""
        return float(self.nearest_sq_dists(np.asarray(q, dtype=np.float64)[None, :])[0])

    def nearest_sq_dists(self, queries: np.ndarray) -> np.ndarray:
        """Squared nearest-point distance for each row of an (N, 3) array.

        Expanding ring search, batched over the still-unresolved queries; a
        query is settled once its best candidate is provably closer than any
        cell outside the searched rings. Queries far outside the occupied
        box fall back to the full scan (same pair expression, same result).
        """
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3:
            raise ValueError("queries must be an (N, 3) array")
        best = np.full(len(q), np.inf)
        if len(q) == 0:
            return best
        qc = np.floor(q / self.cell).astype(np.int64)
        outside = np.maximum(np.maximum(self.cmin - qc, qc - self.cmax), 0).max(axis=1)
        far = outside > 4
        if far.any():
            best[far] = brute_nearest_sq_dists(q[far], self.points)
        # all occupied cells lie within Chebyshev radius kmax of the query cell
        kmax = np.maximum(np.abs(qc - self.cmin), np.abs(qc - self.cmax)).max(axis=1)
        active = np.flatnonzero(~far)
        k = 0
        span = 1
        while len(active):
            k_hi = k + span - 1
            cells = qc[active][:, None, :] + _ring_offsets(k, k_hi)[None, :, :]
            in_box = ((cells >= self.cmin) & (cells <= self.cmax)).all(axis=2)
            u_idx, r_idx = np.nonzero(in_box)
            if len(u_idx):
                keys = self._linear(cells[u_idx, r_idx])
                pos = np.searchsorted(self._ukeys, keys)
                pos[pos == len(self._ukeys)] = 0
                hit = self._ukeys[pos] == keys
                if hit.any():
                    counts = self._counts[pos[hit]]
                    total = int(counts.sum())
                    rep_q = np.repeat(active[u_idx[hit]], counts)
                    span_start = np.repeat(self._starts[pos[hit]], counts)
                    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
                    cand = self._order[span_start + within]
                    dx = self.points[cand, 0] - q[rep_q, 0]
                    dy = self.points[cand, 1] - q[rep_q, 1]
                    dz = self.points[cand, 2] - q[rep_q, 2]
                    np.minimum.at(best, rep_q, dx * dx + dy * dy + dz * dz)
            done = (best[active] <= (k_hi * self.cell) ** 2) | (k_hi >= kmax[active])
            active = active[~done]
            k = k_hi + 1
            span = min(span + 1, 3)
        return best


def brute_nearest_sq_dists(src_xyz: np.ndarray, dst_xyz: np.ndarray) -> np.ndarray:
    """O(n*m) reference scan; shares the distance expression with the index."""
    src = np.asarray(src_xyz, dtype=np.float64)
    dst = np.asarray(dst_xyz, dtype=np.float64)
    out = np.empty(len(src))
    step = max(1, (1 << 22) // max(len(dst), 1))
    for i in range(0, len(src), step):
        s = src[i : i + step]
        dx = dst[None, :, 0] - s[:, None, 0]
        dy = dst[None, :, 1] - s[:, None, 1]
        dz = dst[None, :, 2] - s[:, None, 2]
        out[i : i + step] = (dx * dx + dy * dy + dz * dz).min(axis=1)
    return out


def avg_closest_point_distance(
    src: PointCloud,
    dst: PointCloud,
    symmetric: bool = False,
    use_index: bool = True,
    dst_index: "PointGridIndex | None" = None,
) -> float:
    """Mean over src points of the distance to the nearest dst point.

    One-directional (src -> dst) by default; ``symmetric=True`` averages the
    two directions (Chamfer-style). ``dst_index`` lets callers reuse a
    prebuilt index over dst when the same cloud is queried repeatedly.
    """
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("avg_closest_point_distance requires non-empty clouds")
    if symmetric:
        fwd = avg_closest_point_distance(src, dst, use_index=use_index, dst_index=dst_index)
        bwd = avg_closest_point_distance(dst, src, use_index=use_index)
        return 0.5 * (fwd + bwd)
    if dst_index is not None:
        d2 = dst_index.nearest_sq_dists(src.xyz)
    elif use_index and len(dst) >= 16:
        d2 = PointGridIndex(dst.xyz).nearest_sq_dists(src.xyz)
    else:
        d2 = brute_nearest_sq_dists(src.xyz, dst.xyz)
    return float(np.mean(np.sqrt(d2)))
