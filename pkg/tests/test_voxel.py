"""Voxel grids: quantization hand values, overwrite rules, occupancy
projection, and foreground rasterization against exhaustive oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agodet.geometry import Box3D, Point3, PointCloud, points_to_local
from agodet.scene_io import CropRange
from agodet.voxel import (
    DESK_CROP,
    DESK_GRID,
    KITTI_GRID,
    BevMask,
    FeatureMap,
    GridConfig,
    MapRole,
    bev_occupancy,
    foreground_mask,
    occupied_mask,
    quantize,
    quantize_point,
    require_role,
    to_bev_occupancy,
    voxelize,
)

# ---------------------------------------------------------------------------
# GridConfig
# ---------------------------------------------------------------------------


def test_grid_dims():
    assert KITTI_GRID.dims == (1408, 1600, 40)
    assert KITTI_GRID.bev_shape == (176, 200)
    assert DESK_GRID.dims == (16, 16, 8)
    assert DESK_GRID.bev_shape == (16, 16)


def test_grid_dims_ceil():
    g = GridConfig(CropRange(0.0, 1.01, 0.0, 1.0, 0.0, 1.0), 0.5, 0.5, 0.5, 1)
    assert g.dims[0] == 3  # 1.01/0.5 = 2.02 -> 3


def test_grid_rejects_bad_downsample():
    with pytest.raises(ValueError, match="divide"):
        GridConfig(DESK_CROP, 0.5, 0.5, 0.5, bev_downsample=3)
    with pytest.raises(ValueError, match="step_x"):
        GridConfig(DESK_CROP, 0.0, 0.5, 0.5)


def test_bev_cell_centers():
    centers = DESK_GRID.bev_cell_centers()
    assert centers.shape == (16, 16, 2)
    assert centers[0, 0].tolist() == [0.25, -3.75]
    assert centers[15, 15].tolist() == [7.75, 3.75]


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


def test_quantize_point_hand_values():
    assert quantize_point(Point3(0.0, -40.0, -3.0, 0.0), KITTI_GRID) == (0, 0, 0)
    assert quantize_point(Point3(10.0, -5.0, -1.0, 0.0), KITTI_GRID) == (200, 700, 20)
    assert quantize_point(Point3(70.39, 39.99, 0.99, 0.0), KITTI_GRID) == (1407, 1599, 39)


def test_quantize_point_out_of_range_is_reported():
    assert quantize_point(Point3(-0.01, 0.0, 0.0, 0.0), KITTI_GRID) is None
    assert quantize_point(Point3(70.4, 0.0, 0.0, 0.0), KITTI_GRID) is None
    assert quantize_point(Point3(10.0, 0.0, 1.0, 0.0), KITTI_GRID) is None


@given(
    st.floats(0.01, 70.3), st.floats(0.01, 70.3),
    st.floats(-39.9, 39.9), st.floats(-2.9, 0.9),
)
def test_quantize_monotone_in_x(x1, x2, y, z):
    lo, hi = sorted((x1, x2))
    a = quantize(np.array([[lo, y, z]]), KITTI_GRID)[0]
    b = quantize(np.array([[hi, y, z]]), KITTI_GRID)[0]
    assert a[0] <= b[0]
    assert a[1] == b[1] and a[2] == b[2]


# ---------------------------------------------------------------------------
# Voxelize
# ---------------------------------------------------------------------------


def test_voxelize_empty_cloud():
    t = voxelize(PointCloud(), DESK_GRID)
    assert len(t) == 0
    assert t.dropped == 0


def test_voxelize_last_writer_wins():
    pts = np.array([
        [1.1, 0.1, 0.1, 0.25],
        [1.2, 0.2, 0.2, 0.75],  # same 0.5 m cell as the first
    ])
    t = voxelize(PointCloud(pts), DESK_GRID)
    assert len(t) == 1
    ((idx, point),) = t.entries.items()
    assert idx == (2, 8, 2)
    assert point == Point3(1.2, 0.2, 0.2, 0.75)


def test_voxelize_drop_count():
    pts = np.array([[1.0, 0.0, 0.0, 0.0], [9.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]])
    t = voxelize(PointCloud(pts), DESK_GRID)
    assert len(t) == 1
    assert t.dropped == 2


def test_voxelize_occupancy_matches_brute_oracle_10k():
    rng = np.random.default_rng(0)
    pts = rng.uniform([-1, -5, -2], [9, 5, 4], (10_000, 3))
    t = voxelize(PointCloud(pts), DESK_GRID)

    # naive recomputation, point by point
    want = set()
    dropped = 0
    dims = DESK_GRID.dims
    for x, y, z in pts:
        ix = math.floor((x - 0.0) / 0.5)
        iy = math.floor((y + 4.0) / 0.5)
        iz = math.floor((z + 1.0) / 0.5)
        if 0 <= ix < dims[0] and 0 <= iy < dims[1] and 0 <= iz < dims[2]:
            want.add((ix, iy, iz))
        else:
            dropped += 1
    assert set(t.entries) == want
    assert t.dropped == dropped


def test_voxelize_permutation_keeps_occupied_set():
    rng = np.random.default_rng(1)
    pts = rng.uniform([0.1, -3.9, -0.9], [7.9, 3.9, 2.9], (500, 3))
    fwd = voxelize(PointCloud(pts), DESK_GRID)
    rev = voxelize(PointCloud(pts[::-1]), DESK_GRID)
    assert set(fwd.entries) == set(rev.entries)


# ---------------------------------------------------------------------------
# BEV occupancy
# ---------------------------------------------------------------------------


def test_bev_occupancy_empty():
    fmap = to_bev_occupancy(voxelize(PointCloud(), DESK_GRID))
    assert fmap.role is MapRole.OCCUPANCY
    assert fmap.data.shape == (8, 16, 16)
    assert not fmap.data.any()


def test_bev_occupancy_single_voxel():
    t = voxelize(PointCloud(np.array([[1.3, 0.3, 0.3, 0.0]])), DESK_GRID)
    fmap = to_bev_occupancy(t)
    nz = np.argwhere(fmap.data)
    assert nz.tolist() == [[2, 2, 8]]  # (channel I_z, I_x/ds, I_y/ds)


def test_bev_occupancy_downsample_pools():
    grid = GridConfig(DESK_CROP, 0.5, 0.5, 0.5, bev_downsample=2)
    t = voxelize(PointCloud(np.array([[0.1, -3.9, -0.9, 0.0]])), grid)
    fmap = to_bev_occupancy(t)
    assert fmap.data.shape == (8, 8, 8)
    assert np.argwhere(fmap.data).tolist() == [[0, 0, 0]]


def test_bev_occupancy_matches_projection_oracle():
    rng = np.random.default_rng(5)
    pts = rng.uniform([0.01, -3.99, -0.99], [7.99, 3.99, 2.99], (2000, 3))
    grid = GridConfig(DESK_CROP, 0.5, 0.5, 0.5, bev_downsample=2)
    t = voxelize(PointCloud(pts), grid)
    fmap = to_bev_occupancy(t)
    want = np.zeros_like(fmap.data)
    for (ix, iy, iz) in t.entries:
        want[iz, ix // 2, iy // 2] = 1.0
    assert np.array_equal(fmap.data, want)


def test_occupied_mask_collapses_columns():
    pts = np.array([[1.3, 0.3, -0.9, 0.0], [1.3, 0.3, 2.9, 0.0], [6.1, -2.1, 0.1, 0.0]])
    fmap = bev_occupancy(PointCloud(pts), DESK_GRID)
    mask = occupied_mask(fmap, DESK_GRID)
    assert mask.count == 2
    assert mask.grid[2, 8] and mask.grid[12, 3]


# ---------------------------------------------------------------------------
# FeatureMap / BevMask invariants
# ---------------------------------------------------------------------------


def test_feature_map_guards():
    with pytest.raises(ValueError, match="C, H, W"):
        FeatureMap(np.zeros((4, 4)), MapRole.OCCUPANCY)
    with pytest.raises(ValueError, match="non-finite"):
        FeatureMap(np.full((1, 2, 2), np.nan), MapRole.OCCUPANCY)
    with pytest.raises(ValueError, match="non-negative"):
        FeatureMap(np.full((1, 2, 2), -0.5), MapRole.REWEIGHT)
    fmap = FeatureMap(np.zeros((3, 4, 5)), MapRole.BOX_PERCEPTUAL)
    assert require_role(fmap, MapRole.BOX_PERCEPTUAL) is fmap.data
    with pytest.raises(ValueError, match="expected a reweight map"):
        require_role(fmap, MapRole.REWEIGHT)


def test_bev_mask_shape_guard():
    with pytest.raises(ValueError, match="does not match"):
        BevMask(np.zeros((4, 4), dtype=bool), DESK_GRID)


# ---------------------------------------------------------------------------
# Foreground mask
# ---------------------------------------------------------------------------


def test_foreground_mask_empty():
    assert foreground_mask([], DESK_GRID).count == 0


def test_foreground_mask_axis_aligned_hand_case():
    # 2x2 m box centered at (4, 0) on a 1 m grid covers exactly 4 cells
    grid = GridConfig(DESK_CROP, 1.0, 1.0, 1.0, bev_downsample=1)
    box = Box3D(4.0, 0.0, 0.0, w=2.0, l=2.0, h=1.0, yaw=0.0)
    mask = foreground_mask([box], grid)
    assert mask.count == 4
    assert np.argwhere(mask.grid).tolist() == [[3, 3], [3, 4], [4, 3], [4, 4]]


def test_foreground_mask_matches_per_cell_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        boxes = [
            Box3D(
                cx=float(rng.uniform(0.5, 7.5)),
                cy=float(rng.uniform(-3.5, 3.5)),
                cz=0.5,
                w=float(rng.uniform(0.4, 2.5)),
                l=float(rng.uniform(0.4, 3.5)),
                h=1.0,
                yaw=float(rng.uniform(-math.pi, math.pi)),
            )
            for _ in range(int(rng.integers(1, 4)))
        ]
        mask = foreground_mask(boxes, DESK_GRID)
        centers = DESK_GRID.bev_cell_centers()
        want = np.zeros(DESK_GRID.bev_shape, dtype=bool)
        for i in range(centers.shape[0]):
            for j in range(centers.shape[1]):
                p = np.array([[centers[i, j, 0], centers[i, j, 1], 0.5]])
                for box in boxes:
                    local = points_to_local(box, p)[0]
                    if abs(local[0]) <= box.l / 2 and abs(local[1]) <= box.w / 2:
                        want[i, j] = True
                        break
        assert np.array_equal(mask.grid, want)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_foreground_mask_area_band(seed):
    rng = np.random.default_rng(seed)
    box = Box3D(
        cx=float(rng.uniform(1.5, 6.5)),
        cy=float(rng.uniform(-2.5, 2.5)),
        cz=0.5,
        w=float(rng.uniform(0.5, 2.0)),
        l=float(rng.uniform(0.5, 3.0)),
        h=1.0,
        yaw=float(rng.uniform(-math.pi, math.pi)),
    )
    mask = foreground_mask([box], DESK_GRID)
    cell_area = 0.25
    cell_diag = math.hypot(0.5, 0.5)
    perimeter = 2 * (box.w + box.l)
    band = perimeter * cell_diag + 4 * cell_area
    assert abs(mask.count * cell_area - box.w * box.l) <= band
