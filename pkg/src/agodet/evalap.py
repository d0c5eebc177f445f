"""KITTI-style detection evaluation: greedy matching with ignore semantics,
interpolated average precision at 11 or 40 recall positions, difficulty
columns, and range-bucketed tables.

Ground truths harder than the evaluated difficulty are "ignored": they are
not counted as misses and detections landing on them are excluded from the
precision-recall curve instead of becoming false positives.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box3D, Category, Difficulty, LabeledObject, iou_3d, rotated_bev_iou
from .net import Detection
from .scene_io import (
    Calibration,
    object_from_record,
    read_label_file,
    record_from_object,
    write_label_file,
)


class RecallMode(enum.Enum):
    R11 = "r11"
    R40 = "r40"


class MatchMetric(enum.Enum):
    BEV = "bev"
    THREE_D = "3d"


class DetFlag(enum.Enum):
    TP = "tp"
    FP = "fp"
    IGNORED = "ignored"


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    recall_mode: RecallMode = RecallMode.R40
    match_metric: MatchMetric = MatchMetric.BEV
    range_buckets: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in (0, 1]")
        ordered = sorted(self.range_buckets)
        for (a0, a1), (b0, b1) in zip(ordered, ordered[1:]):
            if b0 < a1:
                raise ValueError(f"overlapping range buckets {(a0, a1)} and {(b0, b1)}")
        for lo, hi in ordered:
            if not lo < hi:
                raise ValueError(f"bucket [{lo}, {hi}) is empty")


def _iou_fn(metric: MatchMetric):
    return rotated_bev_iou if metric is MatchMetric.BEV else iou_3d


def match_detections(
    detections,
    gt_boxes,
    config: EvalConfig,
    gt_ignored=None,
) -> tuple[list[DetFlag], np.ndarray]:
    """Greedy matching over score-sorted detections.

    Each detection takes the highest-IoU still-unmatched valid ground truth
    at or above the threshold. Failing that, a detection overlapping an
    ignored ground truth is excluded from the curve; otherwise it is a false
    positive.
    """
    scores = [d.score for d in detections]
    if any(a < b for a, b in zip(scores, scores[1:])):
        raise ValueError("detections must be sorted by descending score")
    gt_boxes = list(gt_boxes)
    ignored = (
        np.zeros(len(gt_boxes), dtype=bool)
        if gt_ignored is None
        else np.asarray(gt_ignored, dtype=bool)
    )
    iou = _iou_fn(config.match_metric)
    matched = np.zeros(len(gt_boxes), dtype=bool)
    flags: list[DetFlag] = []
    for det in detections:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gt_boxes):
            if ignored[j] or matched[j]:
                continue
            v = iou(det.box, gt)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= config.iou_threshold:
            matched[best_j] = True
            flags.append(DetFlag.TP)
            continue
        hit_ignored = any(
            ignored[j] and iou(det.box, gt) >= config.iou_threshold
            for j, gt in enumerate(gt_boxes)
        )
        flags.append(DetFlag.IGNORED if hit_ignored else DetFlag.FP)
    return flags, matched


# ---------------------------------------------------------------------------
# PR curves and interpolated AP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float


def _recall_points(mode: RecallMode) -> np.ndarray:
    if mode is RecallMode.R11:
        return np.linspace(0.0, 1.0, 11)
    return np.arange(1, 41) / 40.0


def pr_curve(entries, gt_count: int, mode: RecallMode) -> PrCurve:
    """``entries`` are (score, is_tp) pairs already in final curve order
    (descending score with deterministic tie-breaks)."""
    tp = 0
    fp = 0
    recalls, precisions = [], []
    for _, is_tp in entries:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / gt_count)
        precisions.append(tp / (tp + fp))
    recall = np.array(recalls)
    precision = np.array(precisions)
    points = _recall_points(mode)
    interp = []
    for t in points:
        at_least = precision[recall >= t - 1e-12]
        interp.append(float(at_least.max()) if at_least.size else 0.0)
    ap = 100.0 * float(np.mean(interp))
    return PrCurve(recall, precision, ap)


def average_precision(entries, gt_count: int, mode: RecallMode) -> float | None:
    """Interpolated AP percent; None when there are no ground truths."""
    if gt_count == 0:
        return None
    if not entries:
        return 0.0
    return pr_curve(entries, gt_count, mode).ap


# ---------------------------------------------------------------------------
# Multi-scene evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenePredictions:
    scene_id: str
    detections: tuple[Detection, ...]
    gts: tuple[LabeledObject, ...]


_DIFFICULTY_KEYS = {
    Difficulty.EASY: "easy",
    Difficulty.MOD: "moderate",
    Difficulty.HARD: "hard",
}


def _valid_set(level: Difficulty) -> set[Difficulty]:
    order = [Difficulty.EASY, Difficulty.MOD, Difficulty.HARD]
    return set(order[: order.index(level) + 1])


def _bev_distance(box: Box3D) -> float:
    return math.hypot(box.cx, box.cy)


def _in_bucket(box: Box3D, bucket: tuple[float, float] | None) -> bool:
    if bucket is None:
        return True
    return bucket[0] <= _bev_distance(box) < bucket[1]


def _evaluate_subset(
    scene_preds,
    config: EvalConfig,
    category: Category,
    level: Difficulty | None,
    bucket: tuple[float, float] | None,
) -> tuple[float | None, int]:
    """AP for one (difficulty level, bucket) cell; level None disables the
    difficulty filter. Returns (ap, valid gt count)."""
    valid_levels = _valid_set(level) if level is not None else None
    entries = []
    n_gt = 0
    for sp in scene_preds:
        gts = [g for g in sp.gts if g.category in (category, Category.OTHER)]
        boxes = [g.box for g in gts]
        ignored = []
        for g in gts:
            ig = g.category is Category.OTHER
            if valid_levels is not None and g.difficulty not in valid_levels:
                ig = True
            if not _in_bucket(g.box, bucket):
                ig = True
            ignored.append(ig)
        n_gt += sum(1 for ig in ignored if not ig)
        dets = sorted(
            (d for d in sp.detections
             if d.category is category and _in_bucket(d.box, bucket)),
            key=lambda d: -d.score,
        )
        flags, _ = match_detections(dets, boxes, config, ignored)
        for di, (det, flag) in enumerate(zip(dets, flags)):
            if flag is not DetFlag.IGNORED:
                entries.append((det.score, sp.scene_id, di, flag is DetFlag.TP))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    ap = average_precision([(e[0], e[3]) for e in entries], n_gt, config.recall_mode)
    return ap, n_gt


def evaluate(
    scene_preds,
    config: EvalConfig = EvalConfig(),
    category: Category = Category.CAR,
) -> dict:
    """Full report: per-difficulty AP plus per-bucket tables (both with and
    without the difficulty filter)."""
    scene_preds = sorted(scene_preds, key=lambda sp: sp.scene_id)
    report: dict = {
        "category": category.value,
        "iou_threshold": config.iou_threshold,
        "match_metric": config.match_metric.value,
        "recall_mode": config.recall_mode.value,
        "difficulty_ap": {},
        "gt_counts": {},
        "buckets": [],
    }
    for level, key in _DIFFICULTY_KEYS.items():
        ap, n_gt = _evaluate_subset(scene_preds, config, category, level, None)
        report["difficulty_ap"][key] = ap
        report["gt_counts"][key] = n_gt
    for bucket in config.range_buckets:
        filtered = {}
        for level, key in _DIFFICULTY_KEYS.items():
            ap, _ = _evaluate_subset(scene_preds, config, category, level, bucket)
            filtered[key] = ap
        unfiltered, n_gt = _evaluate_subset(scene_preds, config, category, None, bucket)
        report["buckets"].append(
            {
                "range": [bucket[0], bucket[1]],
                "ap_filtered": filtered,
                "ap_unfiltered": unfiltered,
                "gt_count": n_gt,
            }
        )
    return report


def format_report_text(report: dict) -> str:
    def cell(v):
        return "  absent" if v is None else f"{v:8.2f}"

    lines = [
        f"category: {report['category']}  IoU >= {report['iou_threshold']}"
        f"  metric: {report['match_metric']}  mode: {report['recall_mode']}",
        f"{'':12s}{'Easy':>8s}{'Moderate':>9s}{'Hard':>8s}",
        "AP          "
        + cell(report["difficulty_ap"]["easy"])
        + " "
        + cell(report["difficulty_ap"]["moderate"])
        + cell(report["difficulty_ap"]["hard"]),
    ]
    for bucket in report["buckets"]:
        lo, hi = bucket["range"]
        lines.append(
            f"{lo:g}-{hi:g} m     "
            + cell(bucket["ap_filtered"]["easy"])
            + " "
            + cell(bucket["ap_filtered"]["moderate"])
            + cell(bucket["ap_filtered"]["hard"])
            + f"   unfiltered {cell(bucket['ap_unfiltered'])}"
        )
    return "\n".join(lines) + "\n"


def write_report_json(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# KITTI result files
# ---------------------------------------------------------------------------

def write_detections(detections, calib: Calibration, path) -> None:
    records = [
        record_from_object(
            LabeledObject(box=d.box, category=d.category), calib, score=d.score
        )
        for d in detections
    ]
    write_label_file(records, path)


def read_detections(path, calib: Calibration) -> list[Detection]:
    out = []
    for rec in read_label_file(path):
        if rec.score is None:
            raise ValueError(f"{path}: detection line missing a score")
        obj = object_from_record(rec, calib)
        out.append(Detection(obj.box, min(max(rec.score, 0.0), 1.0), obj.category))
    return out
