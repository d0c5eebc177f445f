"""Conceptual-scene construction: bank selection, matching, completion with
the removal rule, whole-scene invariants, and paired augmentation."""

import math
import warnings

import numpy as np
import pytest

from agodet.concept import (
    AugmentConfig,
    CompletionStrategy,
    ConstructionConfig,
    ConstructionStats,
    GtSampleDb,
    build_bank,
    build_conceptual_scene,
    build_sample_db,
    complete_object,
    construction_report,
    match_model,
    paired_augment,
    yaw_bin,
)
from agodet.geometry import (
    Box3D,
    LabeledObject,
    PointCloud,
    avg_closest_point_distance,
    brute_nearest_sq_dists,
)
from agodet.scene_io import Scene, attach_interior_points


def make_object(
    yaw: float = 0.0,
    n_points: int = 30,
    seed: int = 0,
    dims: tuple[float, float, float] = (1.6, 3.9, 1.5),
    center: tuple[float, float, float] = (4.0, 0.0, 0.0),
) -> LabeledObject:
    rng = np.random.default_rng(seed)
    w, l, h = dims
    box = Box3D(*center, w=w, l=l, h=h, yaw=yaw)
    local = rng.uniform(-0.5, 0.5, (n_points, 3)) * [l * 0.98, w * 0.98, h * 0.98]
    pts = np.column_stack([local, rng.uniform(0, 1, n_points)])
    return LabeledObject(box=box, interior_points=PointCloud(pts))


# ---------------------------------------------------------------------------
# Yaw bins and bank selection
# ---------------------------------------------------------------------------


def test_yaw_bin_edges():
    assert yaw_bin(-math.pi, 24) == 0
    assert yaw_bin(math.pi - 1e-9, 24) == 23
    assert yaw_bin(math.pi, 24) == 0  # wraps to -pi
    assert yaw_bin(0.0, 24) == 12


def test_bank_singleton():
    obj = make_object(n_points=12)
    bank = build_bank([obj], ConstructionConfig())
    assert len(bank) == 1
    assert bank.members[0] == obj


def test_bank_top_k_selection_oracle():
    # ten same-bin objects with point counts 1..10 at K=20% -> the 10- and
    # 9-point objects are selected
    objs = [make_object(yaw=0.01 * i, n_points=i + 1, seed=i) for i in range(10)]
    bank = build_bank(objs, ConstructionConfig(group_count=1, selection_percent=20.0))
    counts = sorted(m.point_count for m in bank.members)
    assert counts == [9, 10]


def test_bank_selected_counts_per_group():
    rng = np.random.default_rng(3)
    objs = [
        make_object(yaw=float(rng.uniform(-math.pi, math.pi)), n_points=int(rng.integers(5, 60)), seed=i)
        for i in range(80)
    ]
    config = ConstructionConfig(group_count=8, selection_percent=25.0)
    bank = build_bank(objs, config)
    bins = [0] * 8
    for obj in objs:
        bins[yaw_bin(obj.box.yaw, 8)] += 1
    assert sum(bins) == len(objs)
    for group, size in zip(bank.groups, bins):
        assert len(group) == math.ceil(0.25 * size)
    # members really fall in their own bin
    for g, group in enumerate(bank.groups):
        for member in group:
            assert yaw_bin(member.box.yaw, 8) == g


def test_bank_min_points_filter():
    objs = [make_object(yaw=0.01 * i, n_points=3, seed=i) for i in range(6)]
    bank = build_bank(objs, ConstructionConfig(group_count=1, selection_percent=100.0))
    assert len(bank) == 0


def test_bank_selection_prefers_point_count():
    objs = [make_object(yaw=0.001 * i, n_points=n, seed=i) for i, n in enumerate([30, 50, 40])]
    bank = build_bank(objs, ConstructionConfig(group_count=1, selection_percent=33.0))
    assert [m.point_count for m in bank.members] == [50]


def test_empty_bank_warns():
    with pytest.warns(UserWarning, match="no objects"):
        bank = build_bank([], ConstructionConfig())
    assert len(bank) == 0


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


def test_match_self_is_identity():
    obj = make_object(n_points=40, seed=1)
    other = make_object(n_points=25, seed=2, yaw=0.4)
    bank = build_bank([obj, other], ConstructionConfig(group_count=4, selection_percent=100.0))
    assert match_model(obj, bank) == obj


def test_match_prefers_unshifted_twin():
    base = make_object(n_points=30, seed=5)
    shifted_pts = base.interior_points.data.copy()
    shifted_pts[:, 0] += 1.0
    shifted = LabeledObject(box=base.box, interior_points=PointCloud(shifted_pts))
    bank = build_bank(
        [base, shifted], ConstructionConfig(group_count=1, selection_percent=100.0)
    )
    assert match_model(base, bank) == base


def test_match_errors():
    bank = build_bank([make_object()], ConstructionConfig())
    empty_obj = LabeledObject(box=Box3D(1, 0, 0, 1, 1, 1, 0))
    with pytest.raises(ValueError, match="no interior points"):
        match_model(empty_obj, bank)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        empty_bank = build_bank([], ConstructionConfig())
    with pytest.raises(ValueError, match="empty bank"):
        match_model(make_object(), empty_bank)


def test_match_equals_exhaustive_oracle_20x50():
    rng = np.random.default_rng(7)
    models = [
        make_object(
            yaw=float(rng.uniform(-math.pi, math.pi)),
            n_points=int(rng.integers(6, 80)),
            seed=100 + i,
        )
        for i in range(50)
    ]
    bank = build_bank(models, ConstructionConfig(group_count=6, selection_percent=100.0))
    assert len(bank) == 50
    members = bank.members
    for q in range(20):
        query = make_object(
            yaw=float(rng.uniform(-math.pi, math.pi)),
            n_points=int(rng.integers(4, 60)),
            seed=500 + q,
        )
        keys = []
        for idx, cand in enumerate(members):
            d = avg_closest_point_distance(
                query.interior_points, cand.interior_points, use_index=False
            )
            keys.append((d, -cand.point_count, idx))
        want = members[min(range(len(members)), key=keys.__getitem__)]
        assert match_model(query, bank) == want


def test_match_same_group_flag():
    near = make_object(yaw=0.05, n_points=20, seed=1)
    far_bin = make_object(yaw=2.5, n_points=60, seed=2)
    bank = build_bank(
        [near, far_bin], ConstructionConfig(group_count=8, selection_percent=100.0)
    )
    query_pts = far_bin.interior_points.data.copy()
    query = LabeledObject(
        box=Box3D(4.0, 0.0, 0.0, 1.6, 3.9, 1.5, yaw=0.06),
        interior_points=PointCloud(query_pts),
    )
    # all-group search finds the twin in the other bin
    assert match_model(query, bank) == far_bin
    # same-group search is confined to the query's own yaw bin
    assert match_model(query, bank, same_group_only=True) == near
    lonely_bin_query = LabeledObject(
        box=Box3D(4.0, 0.0, 0.0, 1.6, 3.9, 1.5, yaw=-2.0),
        interior_points=PointCloud(query_pts),
    )
    with pytest.raises(ValueError, match="no models"):
        match_model(lonely_bin_query, bank, same_group_only=True)


# ---------------------------------------------------------------------------
# Completion and the removal rule
# ---------------------------------------------------------------------------


def test_complete_self_add_with_removal_is_identity():
    obj = make_object(n_points=35, seed=9)
    out = complete_object(obj, obj, ConstructionConfig())
    assert np.array_equal(out.data, obj.interior_points.data)


def test_complete_self_replace_reproduces_points():
    obj = make_object(n_points=35, seed=9)
    out = complete_object(
        obj, obj, ConstructionConfig(strategy=CompletionStrategy.REPLACE)
    )
    assert np.allclose(out.data, obj.interior_points.data, atol=1e-9)


def test_removal_rule_matches_brute_force_oracle():
    rng = np.random.default_rng(13)
    box = Box3D(4.0, 0.0, 0.0, 1.6, 3.9, 1.5, yaw=0.0)
    for trial in range(30):
        n_orig = int(rng.integers(1, 40)) if trial else 5
        n_model = int(rng.integers(10, 150)) if trial else 100
        orig = rng.uniform(-0.5, 0.5, (n_orig, 3)) * [3.8, 1.5, 1.4]
        model_local = rng.uniform(-0.5, 0.5, (n_model, 3)) * [3.8, 1.5, 1.4]
        obj = LabeledObject(
            box=box,
            interior_points=PointCloud(np.column_stack([orig, np.zeros(n_orig)])),
        )
        model = LabeledObject(
            box=box,
            interior_points=PointCloud(
                np.column_stack([model_local, np.ones(n_model)])
            ),
        )
        out = complete_object(obj, model, ConstructionConfig(removal_radius=0.25))
        d2 = brute_nearest_sq_dists(model_local, orig)
        keep = d2 > 0.25**2
        assert len(out) == n_orig + int(keep.sum())
        assert np.array_equal(out.data[:n_orig], obj.interior_points.data)
        assert np.array_equal(out.data[n_orig:], model.interior_points.data[keep])


def test_completion_scales_model_to_object_dims():
    model = make_object(n_points=50, seed=21, dims=(2.0, 4.0, 2.0))
    target_box = Box3D(4.0, 0.0, 0.0, w=1.0, l=2.0, h=1.0, yaw=0.7)
    obj = LabeledObject(box=target_box, interior_points=PointCloud(np.zeros((1, 4))))
    out = complete_object(obj, model, ConstructionConfig(removal_radius=0.0))
    added = out.data[1:]
    # model spans were within 98% of dims; halved dims shrink them by 2
    assert np.abs(added[:, 0]).max() <= 2.0 / 2 * 0.99
    assert np.abs(added[:, 1]).max() <= 1.0 / 2 * 0.99
    assert np.abs(added[:, 2]).max() <= 1.0 / 2 * 0.99
    assert np.array_equal(added[:, 3], model.interior_points.data[:, 3])


# ---------------------------------------------------------------------------
# Whole-scene construction
# ---------------------------------------------------------------------------


def _scene_with(objects, seed=0, n_ground=120) -> Scene:
    rng = np.random.default_rng(seed)
    ground = np.column_stack(
        [rng.uniform([0.2, -3.8], [7.8, 3.8], (n_ground, 2)), np.zeros((n_ground, 2))]
    )
    parts = [ground] + [o.world_points().data for o in objects]
    cloud = PointCloud(np.concatenate(parts, axis=0), frame_id=f"s{seed}")
    attached = attach_interior_points(cloud, [LabeledObject(box=o.box) for o in objects])
    return Scene(f"s{seed}", cloud, attached)


def test_conceptual_scene_no_objects_is_identity():
    scene = Scene("empty", PointCloud(np.random.default_rng(0).uniform(0, 7, (50, 4))))
    bank = build_bank([make_object()], ConstructionConfig())
    out = build_conceptual_scene(scene, bank)
    assert out.cloud == scene.cloud
    assert out.objects == ()


def test_conceptual_scene_invariants():
    rng = np.random.default_rng(33)
    models = [
        make_object(
            yaw=float(rng.uniform(-math.pi, math.pi)),
            n_points=int(rng.integers(40, 90)),
            seed=700 + i,
            center=(4.0, 0.0, 0.0),
        )
        for i in range(12)
    ]
    bank = build_bank(models, ConstructionConfig(group_count=6, selection_percent=100.0))
    config = ConstructionConfig()
    objs = [
        make_object(yaw=0.3, n_points=12, seed=61, center=(2.0, -1.5, 0.0)),
        make_object(yaw=-1.2, n_points=25, seed=62, center=(6.0, 1.5, 0.0)),
        make_object(yaw=2.9, n_points=8, seed=63, center=(4.0, 2.8, 0.0)),
    ]
    scene = _scene_with(objs, seed=4)
    stats = ConstructionStats()
    out = build_conceptual_scene(scene, bank, config, stats)

    assert stats.completed == 3 and stats.skipped == 0
    assert [o.box for o in out.objects] == [o.box for o in scene.objects]
    assert [o.category for o in out.objects] == [o.category for o in scene.objects]
    assert [o.difficulty for o in out.objects] == [o.difficulty for o in scene.objects]

    for old, new in zip(scene.objects, out.objects):
        old_pts = old.interior_points.data
        new_pts = new.interior_points.data
        # counts never shrink, originals survive bit-exactly as a prefix
        assert len(new_pts) >= len(old_pts)
        assert np.array_equal(new_pts[: len(old_pts)], old_pts)
        added = new_pts[len(old_pts):]
        if len(added) and len(old_pts):
            d2 = brute_nearest_sq_dists(added[:, :3], old_pts[:, :3])
            assert (d2 > config.removal_radius**2).all()

    # background points (outside all boxes) are preserved bit-exactly
    inside = np.zeros(len(scene.cloud), dtype=bool)
    for obj in scene.objects:
        inside |= obj.box.contains(scene.cloud.xyz)
    background = scene.cloud.data[~inside]
    assert np.array_equal(out.cloud.data[: len(background)], background)

    # per-object composition matches the standalone operation chain
    for old, new in zip(scene.objects, out.objects):
        model = match_model(old, bank)
        want = complete_object(old, model, config)
        assert np.array_equal(new.interior_points.data, want.data)


def test_conceptual_scene_skips_unmatchable():
    bank = build_bank([make_object(n_points=50)], ConstructionConfig())
    empty_obj = LabeledObject(box=Box3D(6.0, 2.0, 0.0, 1.0, 2.0, 1.0, 0.0))
    scene = Scene("sk", PointCloud(np.zeros((0, 4))), (empty_obj,))
    stats = ConstructionStats()
    out = build_conceptual_scene(scene, bank, stats=stats)
    assert stats.skipped == 1 and stats.completed == 0
    assert out.objects[0] == empty_obj


def test_construction_report_keys():
    obj = make_object(n_points=20, seed=3)
    bank = build_bank([make_object(n_points=50, seed=4)], ConstructionConfig())
    scene = _scene_with([obj], seed=8)
    stats = ConstructionStats()
    build_conceptual_scene(scene, bank, stats=stats)
    report = construction_report(bank, stats)
    assert report["model_count"] == 1
    assert sum(report["group_sizes"]) == 1
    assert report["completed_objects"] == stats.completed
    assert report["skipped_objects"] == stats.skipped
    assert report["mean_added_points"] == pytest.approx(float(np.mean(stats.added_points)))


# ---------------------------------------------------------------------------
# Paired augmentation
# ---------------------------------------------------------------------------


def _paired_scenes(seed=0):
    objs = [
        make_object(yaw=0.5, n_points=20, seed=71, center=(2.5, -1.0, 0.0)),
        make_object(yaw=-0.7, n_points=30, seed=72, center=(5.5, 1.5, 0.0)),
    ]
    perceptual = _scene_with(objs, seed=seed)
    models = [make_object(yaw=0.1 * i, n_points=60, seed=80 + i) for i in range(6)]
    bank = build_bank(models, ConstructionConfig(group_count=4, selection_percent=100.0))
    conceptual = build_conceptual_scene(perceptual, bank)
    db = build_sample_db([perceptual], bank)
    return perceptual, conceptual, db


def test_paired_augment_deterministic():
    p, c, db = _paired_scenes()
    a1 = paired_augment(p, c, db, rng_seed=123)
    a2 = paired_augment(p, c, db, rng_seed=123)
    assert a1[0].cloud == a2[0].cloud
    assert a1[1].cloud == a2[1].cloud
    assert a1[0].objects == a2[0].objects
    assert a1[1].objects == a2[1].objects


def test_paired_augment_identity_config():
    p, c, db = _paired_scenes()
    config = AugmentConfig(
        sample_count=0, flip_prob=0.0, rotation_range=(0.0, 0.0), scale_range=(1.0, 1.0)
    )
    out_p, out_c = paired_augment(p, c, db, rng_seed=5, config=config)
    assert out_p is p and out_c is c


def test_paired_augment_keeps_boxes_aligned():
    p, c, db = _paired_scenes()
    out_p, out_c = paired_augment(p, c, db, rng_seed=77)
    assert len(out_p.objects) == len(out_c.objects)
    for op, oc in zip(out_p.objects, out_c.objects):
        assert op.box == oc.box
    # pasted objects appear beyond the original two; conceptual side carries
    # the completed (>=) point sets
    assert len(out_p.objects) >= 2
    for op, oc in zip(out_p.objects[2:], out_c.objects[2:]):
        assert oc.point_count >= op.point_count


def test_paired_augment_requires_aligned_inputs():
    p, c, db = _paired_scenes()
    mismatched = Scene(c.scene_id, c.cloud, c.objects[:-1])
    with pytest.raises(ValueError, match="share the box list"):
        paired_augment(p, mismatched, db, rng_seed=0)


def test_paired_augment_pasted_avoid_collisions():
    p, c, db = _paired_scenes()
    out_p, _ = paired_augment(p, c, db, rng_seed=9)
    boxes = [o.box for o in out_p.objects]
    from agodet.geometry import rotated_bev_iou

    for i, a in enumerate(boxes):
        for b in boxes[i + 1:]:
            if a is not b:
                assert rotated_bev_iou(a, b) == 0.0
