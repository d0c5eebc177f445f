"""Anchors, target assignment, box encoding, and the detection losses.

Every loss returns its value together with the analytic gradient so the
training loop composes them without an autograd framework. The reweighting
map is produced outside any gradient tape and is treated as a constant by
everything downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, wrap_angle
from .voxel import BevMask, FeatureMap, GridConfig, MapRole, require_role

ANCHOR_YAWS = (0.0, math.pi / 2.0)
NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class AnchorSpec:
    """Fixed anchor dimensions; two yaws (0, pi/2) per BEV cell."""

    width: float = 1.6
    length: float = 3.9
    height: float = 1.56
    z_center: float = 0.0

    def __post_init__(self):
        if min(self.width, self.length, self.height) <= 0:
            raise ValueError("anchor dims must be > 0")


class AnchorGrid:
    """One anchor per (feature cell, yaw), centered on cell centers."""

    __slots__ = ("grid", "spec", "boxes")

    def __init__(self, grid: GridConfig, spec: AnchorSpec = AnchorSpec()):
        h, w = grid.bev_shape
        centers = grid.bev_cell_centers()
        boxes = np.empty((h, w, len(ANCHOR_YAWS), 7))
        boxes[..., 0] = centers[:, :, 0][:, :, None]
        boxes[..., 1] = centers[:, :, 1][:, :, None]
        boxes[..., 2] = spec.z_center
        boxes[..., 3] = spec.width
        boxes[..., 4] = spec.length
        boxes[..., 5] = spec.height
        boxes[..., 6] = np.array(ANCHOR_YAWS)
        boxes.setflags(write=False)
        self.grid = grid
        self.spec = spec
        self.boxes = boxes

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.boxes.shape[:3]

    @property
    def count(self) -> int:
        return self.boxes[..., 0].size

    @property
    def flat(self) -> np.ndarray:
        return self.boxes.reshape(-1, 7)

    def box_at(self, ix: int, iy: int, k: int) -> Box3D:
        return Box3D.from_array(self.boxes[ix, iy, k])


def _snapped_rects(boxes7: np.ndarray) -> np.ndarray:
    """(N, 4) cx, cy, half_x, half_y after snapping yaw to multiples of pi/2."""
    boxes7 = np.asarray(boxes7, dtype=np.float64).reshape(-1, 7)
    k = np.round(boxes7[:, 6] / (math.pi / 2.0)).astype(np.int64)
    odd = (k % 2) != 0
    out = np.empty((len(boxes7), 4))
    out[:, 0] = boxes7[:, 0]
    out[:, 1] = boxes7[:, 1]
    out[:, 2] = np.where(odd, boxes7[:, 3], boxes7[:, 4]) / 2.0
    out[:, 3] = np.where(odd, boxes7[:, 4], boxes7[:, 3]) / 2.0
    return out


def rect_iou_table(boxes_a7: np.ndarray, boxes_b7: np.ndarray) -> np.ndarray:
    """Pairwise axis-aligned IoU of yaw-snapped BEV rectangles, (N, M)."""
    a = _snapped_rects(boxes_a7)
    b = _snapped_rects(boxes_b7)
    ix = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2]) - \
        np.maximum(a[:, None, 0] - a[:, None, 2], b[None, :, 0] - b[None, :, 2])
    iy = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3]) - \
        np.maximum(a[:, None, 1] - a[:, None, 3], b[None, :, 1] - b[None, :, 3])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    inter[(ix <= 0) | (iy <= 0)] = 0.0
    area_a = 4.0 * a[:, 2] * a[:, 3]
    area_b = 4.0 * b[:, 2] * b[:, 3]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def assign_targets(
    anchors: AnchorGrid,
    gts,
    occupied: BevMask,
    pos_thr: float = 0.6,
    neg_thr: float = 0.45,
) -> np.ndarray:
    """Per-anchor label array (H, W, 2): gt index when positive, NEGATIVE,
    or IGNORE.

    An anchor is positive when its snapped-rectangle IoU with some ground
    truth reaches ``pos_thr`` or when it is that ground truth's best anchor;
    negative below ``neg_thr``; anchors in cells without any points are
    discarded (IGNORE) regardless.
    """
    if not 0.0 <= neg_thr <= pos_thr <= 1.0:
        raise ValueError("need 0 <= neg_thr <= pos_thr <= 1")
    h, w, a = anchors.shape
    labels = np.full(h * w * a, NEGATIVE, dtype=np.int64)
    gt7 = np.array([g.as_array() for g in gts]).reshape(-1, 7)
    if len(gt7):
        iou = rect_iou_table(anchors.flat, gt7)
        amax = iou.max(axis=1)
        aarg = iou.argmax(axis=1)
        labels[(amax >= neg_thr) & (amax < pos_thr)] = IGNORE
        pos = amax >= pos_thr
        labels[pos] = aarg[pos]
        for j in range(len(gt7)):
            best = int(iou[:, j].argmax())
            if iou[best, j] > 0.0:
                labels[best] = j
    labels = labels.reshape(h, w, a)
    labels[~occupied.grid] = IGNORE
    return labels


# ---------------------------------------------------------------------------
# Box encoding (normalized residuals) and its exact inverse
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxDeltas:
    dx: float
    dy: float
    dz: float
    dw: float
    dl: float
    dh: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dw, self.dl, self.dh, self.dtheta])

    @staticmethod
    def from_array(a) -> "BoxDeltas":
        return BoxDeltas(*(float(v) for v in a))


def encode_boxes(anchors7: np.ndarray, gts7: np.ndarray) -> np.ndarray:
    """Normalized residuals: centers scaled by the anchor diagonal (x, z)
    and height (y), log-ratio dims, raw yaw difference."""
    anchors7 = np.asarray(anchors7, dtype=np.float64)
    gts7 = np.asarray(gts7, dtype=np.float64)
    if (gts7[..., 3:6] <= 0).any():
        raise ValueError("ground-truth dims must be > 0")
    d_a = np.sqrt(anchors7[..., 4] ** 2 + anchors7[..., 3] ** 2)
    out = np.empty_like(gts7)
    out[..., 0] = (anchors7[..., 0] - gts7[..., 0]) / d_a
    out[..., 1] = (anchors7[..., 1] - gts7[..., 1]) / anchors7[..., 5]
    out[..., 2] = (anchors7[..., 2] - gts7[..., 2]) / d_a
    out[..., 3] = np.log(gts7[..., 3] / anchors7[..., 3])
    out[..., 4] = np.log(gts7[..., 4] / anchors7[..., 4])
    out[..., 5] = np.log(gts7[..., 5] / anchors7[..., 5])
    out[..., 6] = gts7[..., 6] - anchors7[..., 6]
    return out


def decode_boxes(anchors7: np.ndarray, deltas7: np.ndarray) -> np.ndarray:
    anchors7 = np.asarray(anchors7, dtype=np.float64)
    deltas7 = np.asarray(deltas7, dtype=np.float64)
    d_a = np.sqrt(anchors7[..., 4] ** 2 + anchors7[..., 3] ** 2)
    out = np.empty_like(deltas7)
    out[..., 0] = anchors7[..., 0] - deltas7[..., 0] * d_a
    out[..., 1] = anchors7[..., 1] - deltas7[..., 1] * anchors7[..., 5]
    out[..., 2] = anchors7[..., 2] - deltas7[..., 2] * d_a
    out[..., 3] = anchors7[..., 3] * np.exp(deltas7[..., 3])
    out[..., 4] = anchors7[..., 4] * np.exp(deltas7[..., 4])
    out[..., 5] = anchors7[..., 5] * np.exp(deltas7[..., 5])
    out[..., 6] = anchors7[..., 6] + deltas7[..., 6]
    return out


def encode_box(anchor: Box3D, gt: Box3D) -> BoxDeltas:
    return BoxDeltas.from_array(encode_boxes(anchor.as_array(), gt.as_array()))


def decode_box(anchor: Box3D, deltas: BoxDeltas) -> Box3D:
    arr = decode_boxes(anchor.as_array(), deltas.as_array())
    arr[6] = wrap_angle(float(arr[6]))
    return Box3D.from_array(arr)


def regression_targets(anchors: AnchorGrid, gts, labels: np.ndarray) -> np.ndarray:
    """(H, W, A, 7) encoded residuals for positive anchors, zeros elsewhere.

    The yaw residual is folded into (-pi/2, pi/2]: box orientation is only
    observable modulo pi from a point cloud (footprints are 180-degree
    symmetric), so the raw residual would put conflicting targets on
    identical inputs. Overlap metrics share that symmetry, so nothing is
    lost downstream.
    """
    out = np.zeros(anchors.shape + (7,))
    pos = labels >= 0
    if pos.any():
        gt7 = np.array([g.as_array() for g in gts])
        deltas = encode_boxes(anchors.boxes[pos], gt7[labels[pos]])
        deltas[:, 6] = -((-deltas[:, 6] + math.pi / 2) % math.pi) + math.pi / 2
        out[pos] = deltas
    return out


# ---------------------------------------------------------------------------
# Elementwise losses with gradients
# ---------------------------------------------------------------------------

def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def focal_loss(
    logit: np.ndarray,
    is_positive: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    literal_sign: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise focal loss on p = sigmoid(logit) and d(loss)/d(logit).

    loss = -alpha_t * (1 - p_t)^gamma * log(p_t) with p_t = p for positives
    and 1 - p otherwise; evaluated in log-space so saturated logits stay
    finite. ``literal_sign`` drops the leading minus, yielding the
    non-positive variant; kept only for side-by-side comparison.
    """
    x = np.asarray(logit, dtype=np.float64)
    positive = np.asarray(is_positive, dtype=bool)
    p = sigmoid(x)
    log_p = -_softplus(-x)
    log_q = -_softplus(x)
    # (1-p)^gamma = exp(gamma * log(1-p)); p^gamma = exp(gamma * log p)
    one_m_p_g = np.exp(gamma * log_q)
    p_g = np.exp(gamma * log_p)
    loss_pos = -alpha * one_m_p_g * log_p
    loss_neg = -(1.0 - alpha) * p_g * log_q
    grad_pos = alpha * (gamma * p * one_m_p_g * log_p - one_m_p_g * (1.0 - p))
    grad_neg = (1.0 - alpha) * (p_g * p - gamma * (1.0 - p) * p_g * log_q)
    loss = np.where(positive, loss_pos, loss_neg)
    grad = np.where(positive, grad_pos, grad_neg)
    if literal_sign:
        return -loss, -grad
    return loss, grad


def smooth_l1(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside; gradient is continuous."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1.0
    loss = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    grad = np.where(small, x, np.sign(x))
    return loss, grad


# ---------------------------------------------------------------------------
# SC-reweight
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrParams:
    """Channel-reweighting MLP: average pool -> J -> J/2 -> J -> softmax."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def channel_weights(self, pooled: np.ndarray) -> np.ndarray:
        hidden = np.maximum(self.w1 @ pooled + self.b1, 0.0)
        z = self.w2 @ hidden + self.b2
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()


def init_cr_params(channels: int, rng: np.random.Generator) -> CrParams:
    hidden = max(channels // 2, 1)
    lim = 1.0 / math.sqrt(channels)
    return CrParams(
        w1=rng.uniform(-lim, lim, size=(hidden, channels)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-lim, lim, size=(channels, hidden)),
        b2=np.zeros(channels),
    )


def sc_reweight(
    fc_p: FeatureMap, fc_c: FeatureMap, m_fg: BevMask, cr: CrParams
) -> FeatureMap:
    """Spatial-channel reweighting map.

    Spatial factor: squared difference of the channel means, masked to the
    foreground and max-normalized into [0, 1], tiled across channels.
    Channel factor: 1 + softmax weights from the pooled feature difference.
    Computed entirely outside the gradient tape; downstream losses treat the
    result as a constant.
    """
    p = require_role(fc_p, MapRole.CLASS_PERCEPTUAL)
    c = require_role(fc_c, MapRole.CLASS_CONCEPTUAL)
    if p.shape != c.shape:
        raise ValueError(f"feature shapes differ: {p.shape} vs {c.shape}")
    if m_fg.grid.shape != p.shape[1:]:
        raise ValueError(f"mask shape {m_fg.grid.shape} does not match {p.shape[1:]}")
    spatial = (p.mean(axis=0) - c.mean(axis=0)) ** 2 * m_fg.grid
    peak = spatial.max()
    if peak > 0.0:
        spatial = spatial / peak
    weights = cr.channel_weights((p - c).mean(axis=(1, 2)))
    data = spatial[None, :, :] * (1.0 + weights[:, None, None])
    return FeatureMap(data, MapRole.REWEIGHT)


# ---------------------------------------------------------------------------
# Association loss
# ---------------------------------------------------------------------------

# Divisor for the association mean: True averages over N pixels * J channels
# (per-element mean, scale-stable across channel counts); False divides by N
# only. Both are exercised by tests; training uses the per-element form.
ASSOCIATION_PER_ELEMENT_MEAN = True


def association_loss(
    fb_p: FeatureMap,
    fb_c: FeatureMap,
    m_rw: FeatureMap,
    pixel_mask: np.ndarray | None = None,
    per_element_mean: bool = ASSOCIATION_PER_ELEMENT_MEAN,
) -> tuple[float, np.ndarray]:
    """Mean reweighted smooth-L1 gap between box features.

    Sums smooth_l1(fb_p - fb_c) * (1 + m_rw) over channels and the N active
    pixels, normalized by N*J (or N alone, see above). Active pixels default
    to those where the reweight map has any nonzero channel; ``pixel_mask``
    overrides that set (used by the unweighted ablation). N == 0 gives loss 0
    with zero gradient. The gradient flows only into fb_p.
    """
    p = require_role(fb_p, MapRole.BOX_PERCEPTUAL)
    c = require_role(fb_c, MapRole.BOX_CONCEPTUAL)
    rw = require_role(m_rw, MapRole.REWEIGHT)
    if not (p.shape == c.shape == rw.shape):
        raise ValueError(
            f"map shapes differ: {p.shape}, {c.shape}, {rw.shape}"
        )
    active = (rw != 0.0).any(axis=0) if pixel_mask is None else np.asarray(pixel_mask, dtype=bool)
    if active.shape != p.shape[1:]:
        raise ValueError(f"pixel mask shape {active.shape} does not match {p.shape[1:]}")
    n = int(active.sum())
    if n == 0:
        return 0.0, np.zeros_like(p)
    denom = n * p.shape[0] if per_element_mean else n
    loss_el, grad_el = smooth_l1(p - c)
    weight = (1.0 + rw) * active[None, :, :]
    loss = float((loss_el * weight).sum() / denom)
    grad = grad_el * weight / denom
    return loss, grad


# ---------------------------------------------------------------------------
# Loss composition
# ---------------------------------------------------------------------------

def cfg_loss(class_terms: np.ndarray, box_terms: np.ndarray) -> float:
    """Classification averaged over non-ignored anchors plus regression
    averaged over positive anchors; callers pass the already-masked terms."""
    class_terms = np.asarray(class_terms, dtype=np.float64)
    box_terms = np.asarray(box_terms, dtype=np.float64)
    c = float(class_terms.mean()) if class_terms.size else 0.0
    b = float(box_terms.mean()) if box_terms.size else 0.0
    return c + b


def total_loss(
    class_terms: np.ndarray, box_terms: np.ndarray, ago: float, sigma: float = 1.0
) -> float:
    """Detection loss plus the sigma-weighted association term."""
    return cfg_loss(class_terms, box_terms) + sigma * float(ago)
