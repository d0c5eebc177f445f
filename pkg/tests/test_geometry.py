"""Geometry tests: hand examples, rasterization oracle, brute-force
nearest-neighbor oracle, and round-trip properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agodet.geometry import (
    Box3D,
    PointCloud,
    avg_closest_point_distance,
    bev_rect_iou,
    brute_nearest_sq_dists,
    clip_polygon,
    footprint_intersection_area,
    iou_3d,
    iou_matrix,
    points_to_local,
    points_to_world,
    polygon_area,
    rotated_bev_iou,
    transform_to_local,
    transform_to_world,
    wrap_angle,
    PointGridIndex,
)

RNG = np.random.default_rng(20240817)


def random_box(rng, max_center=2.0, dims=(0.4, 2.6)) -> Box3D:
    lo, hi = dims
    return Box3D(
        cx=float(rng.uniform(-max_center, max_center)),
        cy=float(rng.uniform(-max_center, max_center)),
        cz=float(rng.uniform(-1.0, 1.0)),
        w=float(rng.uniform(lo, hi)),
        l=float(rng.uniform(lo, hi)),
        h=float(rng.uniform(lo, hi)),
        yaw=float(rng.uniform(-math.pi, math.pi)),
    )


# ---------------------------------------------------------------------------
# Rasterization oracle for rotated overlap
# ---------------------------------------------------------------------------

def _inside_footprint(box: Box3D, xy: np.ndarray) -> np.ndarray:
    """Boolean mask of 2D points strictly within the rotated footprint."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = xy[:, 0] - box.cx
    dy = xy[:, 1] - box.cy
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= box.l / 2) & (np.abs(ly) <= box.w / 2)


def raster_iou(a: Box3D, b: Box3D, cell: float = 0.001) -> float:
    """Count 1 mm cells inside both footprints; exact areas for the union.

    Only the bounding-box overlap needs rasterizing since |A| and |B| are
    known in closed form.
    """
    ax, ay = a.footprint().T
    bx, by = b.footprint().T
    x0, x1 = max(ax.min(), bx.min()), min(ax.max(), bx.max())
    y0, y1 = max(ay.min(), by.min()), min(ay.max(), by.max())
    inter = 0.0
    if x1 > x0 and y1 > y0:
        xs = np.arange(x0 + cell / 2, x1, cell)
        ys = np.arange(y0 + cell / 2, y1, cell)
        count = 0
        # Row-chunked to bound memory; each row is a 1D strip of cells.
        for ychunk in np.array_split(ys, max(1, len(ys) // 256)):
            gx, gy = np.meshgrid(xs, ychunk, indexing="ij")
            pts = np.column_stack([gx.ravel(), gy.ravel()])
            count += int((_inside_footprint(a, pts) & _inside_footprint(b, pts)).sum())
        inter = count * cell * cell
    area_a = a.w * a.l
    area_b = b.w * b.l
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def test_rotated_iou_matches_raster_oracle_200_pairs():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        a = random_box(rng)
        b = random_box(rng)
        got = rotated_bev_iou(a, b)
        want = raster_iou(a, b)
        worst = max(worst, abs(got - want))
    assert worst < 0.01, f"max |clip - raster| = {worst}"


def test_rotated_iou_hand_cases():
    sq = Box3D(0, 0, 0, w=1, l=1, h=1, yaw=0.0)
    assert rotated_bev_iou(sq, sq) == pytest.approx(1.0, abs=1e-12)
    sq90 = Box3D(0, 0, 0, 1, 1, 1, yaw=math.pi / 2)
    assert rotated_bev_iou(sq, sq90) == pytest.approx(1.0, abs=1e-9)
    sq45 = Box3D(0, 0, 0, 1, 1, 1, yaw=math.pi / 4)
    inter = footprint_intersection_area(sq, sq45)
    want_inter = 2.0 * (math.sqrt(2.0) - 1.0)
    assert inter == pytest.approx(want_inter, abs=1e-9)
    assert rotated_bev_iou(sq, sq45) == pytest.approx(
        want_inter / (2.0 - want_inter), abs=1e-9
    )


def test_rotated_iou_symmetry_and_rigid_invariance():
    rng = np.random.default_rng(11)
    for _ in range(50):
        a = random_box(rng)
        b = random_box(rng)
        assert rotated_bev_iou(a, b) == rotated_bev_iou(b, a)
        # joint rigid motion: rotate both about the origin, then translate
        phi = float(rng.uniform(-math.pi, math.pi))
        tx, ty = rng.uniform(-3, 3, size=2)
        moved = []
        for box in (a, b):
            c, s = math.cos(phi), math.sin(phi)
            moved.append(
                Box3D(
                    c * box.cx - s * box.cy + tx,
                    s * box.cx + c * box.cy + ty,
                    box.cz,
                    box.w,
                    box.l,
                    box.h,
                    wrap_angle(box.yaw + phi),
                )
            )
        before = rotated_bev_iou(a, b)
        after = rotated_bev_iou(*moved)
        assert after == pytest.approx(before, abs=1e-9)


def test_rect_iou_hand_cases():
    a = Box3D(0, 0, 0, 1, 1, 1, 0.0)
    assert bev_rect_iou(a, a) == pytest.approx(1.0)
    b = Box3D(0.5, 0, 0, 1, 1, 1, 0.0)
    assert bev_rect_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    far = Box3D(10.0, 0, 0, 1, 1, 1, 0.0)
    assert bev_rect_iou(a, far) == 0.0
    # snapping: a quarter-turn swaps the axis-aligned extents
    rot = Box3D(0, 0, 0, 1, 2, 1, yaw=math.pi / 2)
    tall = Box3D(0, 0, 0, 2, 1, 1, yaw=0.0)
    assert bev_rect_iou(rot, tall) == pytest.approx(1.0)


def test_iou_3d_vertical_overlap():
    a = Box3D(0, 0, 0.0, 1, 1, 1, 0.0)
    assert iou_3d(a, a) == pytest.approx(1.0)
    # same footprint, shifted up by half a height: V_inter = 0.5, V_union = 1.5
    b = Box3D(0, 0, 0.5, 1, 1, 1, 0.0)
    assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    c = Box3D(0, 0, 2.0, 1, 1, 1, 0.0)
    assert iou_3d(a, c) == 0.0


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(3)
    boxes_a = [random_box(rng) for _ in range(6)]
    boxes_b = [random_box(rng) for _ in range(4)]
    m = iou_matrix(boxes_a, boxes_b, metric="bev")
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            assert m[i, j] == rotated_bev_iou(a, b)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def test_local_transform_hand_cases():
    cloud = PointCloud(np.array([[1.0, 0.0, 0.0, 0.5]]))
    ident = Box3D(0, 0, 0, 1, 1, 1, 0.0)
    out = transform_to_local(ident, cloud)
    assert np.allclose(out.data, cloud.data)

    shifted = Box3D(1, 0, 0, 1, 1, 1, 0.0)
    out = transform_to_local(shifted, cloud)
    assert np.allclose(out.xyz, [[0.0, 0.0, 0.0]])

    quarter = Box3D(0, 0, 0, 1, 1, 1, math.pi / 2)
    out = transform_to_local(quarter, cloud)
    assert np.allclose(out.xyz, [[0.0, -1.0, 0.0]], atol=1e-12)


def test_local_world_round_trip_1000_poses():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-4, 4, size=(50, 3))
    worst = 0.0
    for _ in range(1000):
        box = random_box(rng, max_center=5.0)
        back = points_to_world(box, points_to_local(box, pts))
        worst = max(worst, float(np.abs(back - pts).max()))
    assert worst < 1e-9


def test_transform_round_trip_cloud():
    rng = np.random.default_rng(9)
    data = np.column_stack([rng.uniform(-2, 2, (30, 3)), rng.uniform(0, 1, 30)])
    cloud = PointCloud(data, frame_id="s0")
    box = random_box(rng)
    back = transform_to_world(box, transform_to_local(box, cloud))
    assert np.allclose(back.data, cloud.data, atol=1e-9)
    assert back.frame_id == cloud.frame_id


# ---------------------------------------------------------------------------
# Point-set distances: spatial index vs brute force
# ---------------------------------------------------------------------------

def test_nearest_index_bit_equal_to_brute_force_100_pairs():
    rng = np.random.default_rng(13)
    for _ in range(100):
        n = int(rng.integers(1, 500))
        m = int(rng.integers(16, 500))
        src = rng.uniform(-5, 5, size=(n, 3))
        dst = rng.uniform(-5, 5, size=(m, 3))
        idx = PointGridIndex(dst)
        got = idx.nearest_sq_dists(src)
        want = brute_nearest_sq_dists(src, dst)
        assert np.array_equal(got, want)


def test_avg_closest_distance_index_vs_brute():
    rng = np.random.default_rng(17)
    for _ in range(20):
        src = PointCloud(np.column_stack([rng.uniform(-3, 3, (120, 3)), np.zeros(120)]))
        dst = PointCloud(np.column_stack([rng.uniform(-3, 3, (200, 3)), np.zeros(200)]))
        a = avg_closest_point_distance(src, dst, use_index=True)
        b = avg_closest_point_distance(src, dst, use_index=False)
        assert a == b


def test_avg_closest_distance_hand_cases():
    src = PointCloud(np.array([[0.0, 0.0, 0.0, 0.0]]))
    dst = PointCloud(np.array([[1.0, 0.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0]]))
    assert avg_closest_point_distance(src, dst) == pytest.approx(1.0)
    assert avg_closest_point_distance(src, src) == 0.0
    with pytest.raises(ValueError):
        avg_closest_point_distance(src, PointCloud())
    with pytest.raises(ValueError):
        avg_closest_point_distance(PointCloud(), dst)


def test_avg_closest_distance_not_symmetric():
    src = PointCloud(np.array([[0.0, 0.0, 0.0, 0.0]]))
    dst = PointCloud(np.array([[1.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0]]))
    fwd = avg_closest_point_distance(src, dst)
    rev = avg_closest_point_distance(dst, src)
    assert fwd == pytest.approx(1.0)
    assert rev == pytest.approx(1.5)
    sym = avg_closest_point_distance(src, dst, symmetric=True)
    assert sym == pytest.approx((fwd + rev) / 2)


# ---------------------------------------------------------------------------
# Polygon clipping primitives
# ---------------------------------------------------------------------------

def test_polygon_area_ccw_square():
    sq = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    assert polygon_area(sq) == pytest.approx(1.0)


def test_clip_polygon_identical_and_disjoint():
    sq = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    clipped = clip_polygon(sq, sq)
    assert polygon_area(clipped) == pytest.approx(1.0, abs=1e-12)
    far = sq + np.array([10.0, 0.0])
    assert polygon_area(clip_polygon(sq, far)) == 0.0


# ---------------------------------------------------------------------------
# Properties
# ---------------------------------------------------------------------------

@given(st.floats(-100.0, 100.0))
def test_wrap_angle_range(x):
    w = wrap_angle(x)
    assert -math.pi <= w < math.pi
    assert math.isclose(math.sin(w), math.sin(x), abs_tol=1e-9)
    assert math.isclose(math.cos(w), math.cos(x), abs_tol=1e-9)


@given(
    st.floats(-5, 5), st.floats(-5, 5), st.floats(-2, 2),
    st.floats(0.1, 4), st.floats(0.1, 4), st.floats(0.1, 4),
    st.floats(-10, 10),
)
def test_box_array_round_trip(cx, cy, cz, w, l, h, yaw):
    box = Box3D(cx, cy, cz, w, l, h, yaw)
    again = Box3D.from_array(box.as_array())
    assert again == box


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_self_iou_is_one(seed):
    box = random_box(np.random.default_rng(seed))
    assert rotated_bev_iou(box, box) == pytest.approx(1.0, abs=1e-9)
    assert iou_3d(box, box) == pytest.approx(1.0, abs=1e-9)


def test_box_validation():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, w=0.0, l=1, h=1, yaw=0)
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, w=1, l=-1, h=1, yaw=0)
    assert Box3D(0, 0, 0, 1, 1, 1, yaw=3 * math.pi).yaw == pytest.approx(-math.pi)


def test_footprint_contains_center_offsets():
    box = Box3D(1.0, -2.0, 0.0, w=1.0, l=2.0, h=1.0, yaw=0.7)
    corners = box.footprint()
    assert corners.shape == (4, 2)
    # corners are at distance hypot(l/2, w/2) from the center
    d = np.hypot(corners[:, 0] - box.cx, corners[:, 1] - box.cy)
    assert np.allclose(d, math.hypot(0.5, 1.0), atol=1e-12)
    # corners sit exactly on the footprint boundary
    shrunk = corners + 1e-9 * (np.array([box.cx, box.cy]) - corners)
    assert _inside_footprint(box, shrunk).all()
