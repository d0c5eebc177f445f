"""Desk-scale dense BEV detector with hand-rolled reverse-mode gradients,
two-phase training (conceptual network first, then the perceptual network
with the association term), and inference with rotated NMS.

Convolutions run as im2col + matmul; every forward keeps the caches needed
for an exact backward pass. Parameters live in one flat float64 vector with
a shape table, so SGD, checkpoints, and gradient checks all see one array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .geometry import Box3D, Category, wrap_angle
from .losses import (
    AnchorGrid,
    AnchorSpec,
    CrParams,
    IGNORE,
    assign_targets,
    association_loss,
    decode_boxes,
    focal_loss,
    init_cr_params,
    regression_targets,
    sc_reweight,
    sigmoid,
    smooth_l1,
)
from .scene_io import Scene
from .voxel import (
    BevMask,
    FeatureMap,
    GridConfig,
    MapRole,
    bev_occupancy,
    foreground_mask,
    occupied_mask,
    require_role,
)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NetSpec:
    """Channel plan: in -> hidden -> hidden -> feat trunk (3x3 convs with
    ReLU), then 1x1 class/box heads. ``dual_branch`` splits the last trunk
    conv into separate class/box branches."""

    in_channels: int
    hidden: int = 16
    feat_channels: int = 16
    anchors_per_cell: int = 2
    dual_branch: bool = False

    def layers(self) -> list[tuple[str, int, int, int]]:
        """(name, out_ch, in_ch, kernel) in parameter-vector order."""
        out = [
            ("conv1", self.hidden, self.in_channels, 3),
            ("conv2", self.hidden, self.hidden, 3),
            ("conv3", self.feat_channels, self.hidden, 3),
        ]
        if self.dual_branch:
            out.append(("conv3b", self.feat_channels, self.hidden, 3))
        out.append(("head_class", self.anchors_per_cell, self.feat_channels, 1))
        out.append(("head_box", 7 * self.anchors_per_cell, self.feat_channels, 1))
        return out


def _param_index(spec: NetSpec) -> tuple[dict, int]:
    index = {}
    pos = 0
    for name, out_ch, in_ch, k in spec.layers():
        wn = out_ch * in_ch * k * k
        index[name] = (slice(pos, pos + wn), (out_ch, in_ch, k, k),
                       slice(pos + wn, pos + wn + out_ch))
        pos += wn + out_ch
    return index, pos


class NetworkParams:
    """Flat parameter vector plus named weight/bias views."""

    __slots__ = ("spec", "flat", "_index")

    def __init__(self, spec: NetSpec, flat: np.ndarray):
        index, size = _param_index(spec)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {flat.shape}")
        self.spec = spec
        self.flat = flat
        self._index = index

    def weight(self, name: str) -> np.ndarray:
        sl, shape, _ = self._index[name]
        return self.flat[sl].reshape(shape)

    def bias(self, name: str) -> np.ndarray:
        _, _, sl = self._index[name]
        return self.flat[sl]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, self.flat.copy())

    @staticmethod
    def init(spec: NetSpec, rng: np.random.Generator) -> "NetworkParams":
        """He-uniform conv weights, zero biases; the class head bias starts
        at -1.99 so early focal loss sees a low foreground prior."""
        _, size = _param_index(spec)
        params = NetworkParams(spec, np.zeros(size))
        for name, out_ch, in_ch, k in spec.layers():
            fan_in = in_ch * k * k
            lim = math.sqrt(6.0 / fan_in)
            params.weight(name)[...] = rng.uniform(-lim, lim, size=(out_ch, in_ch, k, k))
        params.bias("head_class")[...] = -1.99
        return params


def _grad_views(params: NetworkParams, grads: np.ndarray, name: str):
    sl, shape, bsl = params._index[name]
    return grads[sl].reshape(shape), grads[bsl]


# ---------------------------------------------------------------------------
# Conv primitives
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    if k == 1:
        return x.reshape(c, h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = np.empty((c * k * k, h * w))
    r = 0
    for ci in range(c):
        for dy in range(k):
            for dx in range(k):
                cols[r] = xp[ci, dy : dy + h, dx : dx + w].ravel()
                r += 1
    return cols


def _col2im(dcols: np.ndarray, x_shape: tuple[int, int, int], k: int) -> np.ndarray:
    c, h, w = x_shape
    if k == 1:
        return dcols.reshape(c, h, w)
    p = k // 2
    dxp = np.zeros((c, h + 2 * p, w + 2 * p))
    r = 0
    for ci in range(c):
        for dy in range(k):
            for dx in range(k):
                dxp[ci, dy : dy + h, dx : dx + w] += dcols[r].reshape(h, w)
                r += 1
    return dxp[:, p : h + p, p : w + p]


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    out_ch, _, k, _ = w.shape
    _, h, wd = x.shape
    cols = _im2col(x, k)
    out = (w.reshape(out_ch, -1) @ cols + b[:, None]).reshape(out_ch, h, wd)
    return out, cols


def _conv_backward(d_out: np.ndarray, w: np.ndarray, cols: np.ndarray,
                   x_shape: tuple[int, int, int]):
    out_ch, _, k, _ = w.shape
    d_flat = d_out.reshape(out_ch, -1)
    dw = (d_flat @ cols.T).reshape(w.shape)
    db = d_flat.sum(axis=1)
    dcols = w.reshape(out_ch, -1).T @ d_flat
    return dw, db, _col2im(dcols, x_shape, k)


@dataclass
class Tape:
    """Per-layer caches from one forward pass (im2col matrices, ReLU masks,
    input shapes), enough to replay the exact backward."""

    x_shape: tuple[int, int, int]
    cols: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)


@dataclass
class NetOutputs:
    f_class: FeatureMap
    f_box: FeatureMap
    o_class: np.ndarray  # (A, H, W) logits
    o_box: np.ndarray  # (7A, H, W) residuals
    tape: Tape | None


_DOMAIN_ROLES = {
    "perceptual": (MapRole.CLASS_PERCEPTUAL, MapRole.BOX_PERCEPTUAL),
    "conceptual": (MapRole.CLASS_CONCEPTUAL, MapRole.BOX_CONCEPTUAL),
}


def forward(
    params: NetworkParams,
    bev: FeatureMap,
    domain: str = "perceptual",
    need_tape: bool = True,
) -> NetOutputs:
    """Run the trunk and both heads; the trunk output is tagged with the
    domain's class/box roles (one shared tensor unless dual_branch)."""
    x = require_role(bev, MapRole.OCCUPANCY)
    if x.shape[0] != params.spec.in_channels:
        raise ValueError(
            f"input has {x.shape[0]} channels, params expect {params.spec.in_channels}"
        )
    class_role, box_role = _DOMAIN_ROLES[domain]
    tape = Tape(x_shape=x.shape) if need_tape else None

    def conv_relu(name, inp):
        z, cols = _conv_forward(inp, params.weight(name), params.bias(name))
        mask = z > 0.0
        act = z * mask
        if tape is not None:
            tape.cols[name] = cols
            tape.masks[name] = mask
            tape.shapes[name] = inp.shape
        return act

    def conv_plain(name, inp):
        z, cols = _conv_forward(inp, params.weight(name), params.bias(name))
        if tape is not None:
            tape.cols[name] = cols
            tape.shapes[name] = inp.shape
        return z

    a1 = conv_relu("conv1", x)
    a2 = conv_relu("conv2", a1)
    f = conv_relu("conv3", a2)
    if params.spec.dual_branch:
        fb = conv_relu("conv3b", a2)
    else:
        fb = f
    o_class = conv_plain("head_class", f)
    o_box = conv_plain("head_box", fb)
    return NetOutputs(
        f_class=FeatureMap(f, class_role),
        f_box=FeatureMap(fb, box_role),
        o_class=o_class,
        o_box=o_box,
        tape=tape,
    )


def backward(
    params: NetworkParams,
    tape: Tape,
    d_o_class: np.ndarray,
    d_o_box: np.ndarray,
    grads: np.ndarray,
    d_f_box: np.ndarray | None = None,
) -> None:
    """Accumulate parameter gradients into ``grads`` (same layout as
    ``params.flat``). ``d_f_box`` lets the association term inject its
    gradient directly into the box-role trunk feature."""

    def head_back(name, d_out):
        dw, db, dx = _conv_backward(
            d_out, params.weight(name), tape.cols[name], tape.shapes[name]
        )
        gw, gb = _grad_views(params, grads, name)
        gw += dw
        gb += db
        return dx

    def conv_relu_back(name, d_act):
        dz = d_act * tape.masks[name]
        dw, db, dx = _conv_backward(
            dz, params.weight(name), tape.cols[name], tape.shapes[name]
        )
        gw, gb = _grad_views(params, grads, name)
        gw += dw
        gb += db
        return dx

    d_f_class = head_back("head_class", d_o_class)
    d_fb = head_back("head_box", d_o_box)
    if d_f_box is not None:
        d_fb = d_fb + d_f_box
    if params.spec.dual_branch:
        d_a2 = conv_relu_back("conv3", d_f_class) + conv_relu_back("conv3b", d_fb)
    else:
        d_a2 = conv_relu_back("conv3", d_f_class + d_fb)
    d_a1 = conv_relu_back("conv2", d_a2)
    conv_relu_back("conv1", d_a1)


# ---------------------------------------------------------------------------
# Training examples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingExample:
    scene_id: str
    bev: FeatureMap
    labels: np.ndarray  # (H, W, A)
    reg_targets: np.ndarray  # (H, W, A, 7)
    fg_mask: BevMask
    conceptual_bev: FeatureMap | None = None


def prepare_example(
    scene: Scene,
    grid: GridConfig,
    anchors: AnchorGrid,
    pos_thr: float = 0.6,
    neg_thr: float = 0.45,
    conceptual: Scene | None = None,
) -> TrainingExample:
    bev = bev_occupancy(scene.cloud, grid)
    gts = [obj.box for obj in scene.objects]
    labels = assign_targets(anchors, gts, occupied_mask(bev, grid), pos_thr, neg_thr)
    return TrainingExample(
        scene_id=scene.scene_id,
        bev=bev,
        labels=labels,
        reg_targets=regression_targets(anchors, gts, labels),
        fg_mask=foreground_mask(gts, grid),
        conceptual_bev=bev_occupancy(conceptual.cloud, grid) if conceptual else None,
    )


def _detection_loss_and_grads(out: NetOutputs, ex: TrainingExample):
    labels = ex.labels
    logits = out.o_class.transpose(1, 2, 0)
    pos = labels >= 0
    valid = labels != IGNORE
    l_el, g_el = focal_loss(logits, pos)
    n_valid = int(valid.sum())
    class_loss = float(l_el[valid].mean()) if n_valid else 0.0
    d_logits = np.zeros_like(logits)
    if n_valid:
        d_logits[valid] = g_el[valid] / n_valid

    a = labels.shape[2]
    preds = out.o_box.reshape(a, 7, *labels.shape[:2]).transpose(2, 3, 0, 1)
    diff = preds - ex.reg_targets
    bl_el, bg_el = smooth_l1(diff)
    n_pos = int(pos.sum())
    box_loss = float(bl_el[pos].sum(axis=1).mean()) if n_pos else 0.0
    d_preds = np.zeros_like(diff)
    if n_pos:
        d_preds[pos] = bg_el[pos] / n_pos

    d_oc = d_logits.transpose(2, 0, 1)
    d_ob = d_preds.transpose(2, 3, 0, 1).reshape(out.o_box.shape)
    return class_loss, box_loss, d_oc, d_ob


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 2
    base_lr: float = 0.1
    momentum: float = 0.9
    sigma: float = 1.0
    use_sc: bool = True
    seed: int = 0
    # optional linear lr ramp before the cosine decay and a cap on the
    # per-step gradient norm; both off by default (plain SGD + cosine) since
    # neither reliably prevented early relu death of the trunk in trials,
    # kept as knobs for experiments (0 disables either)
    warmup_frac: float = 0.0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))


def schedule_lr(step: int, total_steps: int, base_lr: float,
                warmup_frac: float = 0.0) -> float:
    warmup = int(round(total_steps * warmup_frac))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return cosine_lr(step - warmup, max(total_steps - warmup, 1), base_lr)


def _run_training(
    examples: list[TrainingExample],
    spec: NetSpec,
    config: TrainConfig,
    cfg_params: NetworkParams | None = None,
):
    """Shared SGD loop. With ``cfg_params`` and sigma > 0 each step adds the
    sigma-weighted association term computed against the frozen conceptual
    features; with sigma == 0 the arithmetic is bit-identical to the plain
    baseline loop."""
    if not examples:
        raise ValueError("training requires a non-empty dataset")
    ss = np.random.SeedSequence(config.seed)
    init_rng, shuffle_rng, cr_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    params = NetworkParams.init(spec, init_rng)
    cr = init_cr_params(spec.feat_channels, cr_rng)

    associate = cfg_params is not None and config.sigma != 0.0
    cfg_feats: list[tuple[FeatureMap, FeatureMap] | None] = [None] * len(examples)
    if associate:
        for i, ex in enumerate(examples):
            if ex.conceptual_bev is None:
                raise ValueError(f"scene {ex.scene_id} lacks a conceptual pair")
            cout = forward(cfg_params, ex.conceptual_bev, domain="conceptual",
                           need_tape=False)
            cfg_feats[i] = (cout.f_class, cout.f_box)

    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    velocity = np.zeros_like(params.flat)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(examples))
        for b in range(steps_per_epoch):
            chunk = order[b * config.batch_size : (b + 1) * config.batch_size]
            grads = np.zeros_like(params.flat)
            mean_class = mean_box = mean_ago = 0.0
            for idx in chunk:
                ex = examples[int(idx)]
                out = forward(params, ex.bev)
                class_loss, box_loss, d_oc, d_ob = _detection_loss_and_grads(out, ex)
                d_fbox = None
                ago = 0.0
                if associate:
                    fc_c, fb_c = cfg_feats[int(idx)]
                    if config.use_sc:
                        m_rw = sc_reweight(out.f_class, fc_c, ex.fg_mask, cr)
                        ago, d_fb = association_loss(out.f_box, fb_c, m_rw)
                    else:
                        # ablated reweighting: unit weight over the same
                        # foreground support the attention map lives on;
                        # spreading it over background pixels drags the
                        # features toward the frozen net's empty-space
                        # response and hurts detection
                        m_rw = FeatureMap(np.zeros_like(fb_c.data), MapRole.REWEIGHT)
                        ago, d_fb = association_loss(
                            out.f_box, fb_c, m_rw, pixel_mask=ex.fg_mask.grid,
                        )
                    d_fbox = config.sigma * d_fb
                backward(params, out.tape, d_oc, d_ob, grads, d_f_box=d_fbox)
                mean_class += class_loss
                mean_box += box_loss
                mean_ago += ago
            n = len(chunk)
            grads /= n
            mean_class /= n
            mean_box /= n
            mean_ago /= n
            if config.grad_clip > 0.0:
                norm = float(np.sqrt(grads @ grads))
                if norm > config.grad_clip:
                    grads *= config.grad_clip / norm
            total = mean_class + mean_box + config.sigma * mean_ago
            if not math.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss {total} at epoch {epoch} step {step}"
                )
            lr = schedule_lr(step, total_steps, config.base_lr,
                             config.warmup_frac)
            velocity *= config.momentum
            velocity += grads
            params.flat -= lr * velocity
            history.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": total,
                    "class": mean_class,
                    "box": mean_box,
                    "ago": mean_ago,
                }
            )
            step += 1
    return params, history


def train_cfg(conceptual_examples, spec: NetSpec, config: TrainConfig):
    """Phase one: train the conceptual network alone on conceptual scenes."""
    return _run_training(conceptual_examples, spec, config, cfg_params=None)


def train_baseline(examples, spec: NetSpec, config: TrainConfig):
    """Plain detector on perceptual scenes, no association."""
    return _run_training(examples, spec, config, cfg_params=None)


def train_ago(paired_examples, cfg_params: NetworkParams, spec: NetSpec,
              config: TrainConfig):
    """Phase two: train the perceptual network with the frozen conceptual
    network supplying association targets. cfg_params are never written."""
    cfg_before = cfg_params.flat.copy()
    result = _run_training(paired_examples, spec, config, cfg_params=cfg_params)
    if not np.array_equal(cfg_before, cfg_params.flat):
        raise RuntimeError("frozen conceptual parameters were modified")
    return result


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    category: Category = Category.CAR

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be in [0, 1]")


def rotated_nms(boxes7: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression: visit by descending score (ties by index), keep a
    box iff its rotated BEV IoU with every kept box is <= threshold."""
    from .geometry import rotated_bev_iou

    boxes = [Box3D.from_array(b) for b in np.asarray(boxes7).reshape(-1, 7)]
    order = np.lexsort((np.arange(len(boxes)), -np.asarray(scores, dtype=np.float64)))
    kept: list[int] = []
    for i in order:
        i = int(i)
        if all(rotated_bev_iou(boxes[i], boxes[k]) <= iou_threshold for k in kept):
            kept.append(i)
    return kept


def infer(
    params: NetworkParams,
    scene: Scene,
    grid: GridConfig,
    anchors: AnchorGrid,
    score_threshold: float = 0.3,
    nms_iou: float = 0.1,
) -> list[Detection]:
    """Sigmoid scores, decode, threshold, rotated NMS, sort by score."""
    bev = bev_occupancy(scene.cloud, grid)
    out = forward(params, bev, need_tape=False)
    scores = sigmoid(out.o_class).transpose(1, 2, 0).reshape(-1)
    a = params.spec.anchors_per_cell
    h, w = bev.bev_shape
    deltas = out.o_box.reshape(a, 7, h, w).transpose(2, 3, 0, 1).reshape(-1, 7)
    keep = scores >= score_threshold
    if not keep.any():
        return []
    idx = np.flatnonzero(keep)
    boxes7 = decode_boxes(anchors.flat[idx], deltas[idx])
    boxes7[:, 6] = np.vectorize(wrap_angle)(boxes7[:, 6])
    kept = rotated_nms(boxes7, scores[idx], nms_iou)
    return [
        Detection(Box3D.from_array(boxes7[k]), float(scores[idx[k]]))
        for k in kept
    ]


# ---------------------------------------------------------------------------
# Checkpoints and logs
# ---------------------------------------------------------------------------

def save_checkpoint(params: NetworkParams, path, extra: dict | None = None) -> None:
    meta = {
        "kind": "checkpoint",
        "in_channels": params.spec.in_channels,
        "hidden": params.spec.hidden,
        "feat_channels": params.spec.feat_channels,
        "anchors_per_cell": params.spec.anchors_per_cell,
        "dual_branch": params.spec.dual_branch,
    }
    if extra:
        meta.update(extra)
    sections = {
        "META": json.dumps(meta, sort_keys=True).encode(),
        "FLAT": np.ascontiguousarray(params.flat, dtype="<f8").tobytes(),
    }
    write_container(path, sections, version=CHECKPOINT_VERSION)


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    _, sections = read_container(path, expected_version=CHECKPOINT_VERSION)
    meta = json.loads(sections["META"].decode())
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    spec = NetSpec(
        in_channels=meta["in_channels"],
        hidden=meta["hidden"],
        feat_channels=meta["feat_channels"],
        anchors_per_cell=meta["anchors_per_cell"],
        dual_branch=meta["dual_branch"],
    )
    flat = np.frombuffer(sections["FLAT"], dtype="<f8").copy()
    return NetworkParams(spec, flat), meta


def write_train_log(history, path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
