"""Pipeline driver: synthesize scenes, build the conceptual domain, run the
two-phase training schedule, and evaluate. The CLI and the study scripts are
thin wrappers over these functions; everything here is deterministic given
the config seed.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import synth as synthmod
from .concept import ConstructionStats, build_bank, build_conceptual_scene, construction_report
from .config import PipelineConfig
from .evalap import ScenePredictions, evaluate, write_report_json
from .losses import AnchorGrid
from .net import (
    NetworkParams,
    infer,
    load_checkpoint,
    prepare_example,
    save_checkpoint,
    train_ago,
    train_baseline,
    train_cfg,
    write_train_log,
)
from .render import GT_GREEN, channel_mean, render_bev
from .scene_io import Scene, load_bank, load_scene, save_bank, save_scene
from .synth import SyntheticSpec
from .voxel import bev_occupancy


@dataclass(frozen=True)
class Workspace:
    """Directory layout for one pipeline run rooted at ``root``."""

    root: Path

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    def split_dir(self, split: str) -> Path:
        return self.dataset_dir / split

    @property
    def manifest_path(self) -> Path:
        return self.dataset_dir / "manifest.json"

    @property
    def concept_dir(self) -> Path:
        return self.root / "concept"

    @property
    def bank_path(self) -> Path:
        return self.concept_dir / "bank.agof"

    def conceptual_dir(self, split: str) -> Path:
        return self.concept_dir / split

    @property
    def concept_report_path(self) -> Path:
        return self.concept_dir / "report.json"

    def checkpoint_path(self, phase: str) -> Path:
        return self.root / "checkpoints" / f"{phase}.agof"

    def log_path(self, phase: str) -> Path:
        return self.root / "logs" / f"train_{phase}.jsonl"

    def report_path(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.json"

    @property
    def render_dir(self) -> Path:
        return self.root / "renders"


# ---------------------------------------------------------------------------
# Stage: synthesize
# ---------------------------------------------------------------------------

def _synth_task(args) -> Scene:
    spec, index, scene_id = args
    child = np.random.SeedSequence(spec.seed, spawn_key=(index,))
    return synthmod.generate_scene(spec, child, scene_id)


def synthesize(spec: SyntheticSpec, workers: int = 1) -> tuple[list[Scene], list[Scene]]:
    """(train, val) scene lists. Child seeds are keyed by scene index, so
    the result is identical for any worker count."""
    total = spec.train_scenes + spec.val_scenes
    tasks = [(spec, i, f"{i:06d}") for i in range(total)]
    if workers > 1 and total > 1:
        chunk = max(1, total // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(_synth_task, tasks, chunksize=chunk))
    else:
        scenes = [_synth_task(t) for t in tasks]
    return scenes[: spec.train_scenes], scenes[spec.train_scenes :]


def write_split(scenes, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        save_scene(scene, directory / f"{scene.scene_id}.agof")


def read_split(directory: Path) -> list[Scene]:
    paths = sorted(Path(directory).glob("*.agof"))
    if not paths:
        raise FileNotFoundError(f"no scenes under {directory} (run synth first)")
    return [load_scene(p) for p in paths]


def run_synth(config: PipelineConfig, ws: Workspace, workers: int = 1) -> dict:
    train, val = synthesize(config.synth, workers)
    write_split(train, ws.split_dir("train"))
    write_split(val, ws.split_dir("val"))
    manifest = {
        "seed": config.synth.seed,
        "train": [s.scene_id for s in train],
        "val": [s.scene_id for s in val],
    }
    ws.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {
        "train_scenes": len(train),
        "val_scenes": len(val),
        "train_objects": sum(len(s.objects) for s in train),
        "val_objects": sum(len(s.objects) for s in val),
    }


# ---------------------------------------------------------------------------
# Stage: conceptual domain
# ---------------------------------------------------------------------------

def build_concept_stage(train_scenes, config: PipelineConfig):
    """Bank from the train split only, then one conceptual twin per scene."""
    objects = [obj for scene in train_scenes for obj in scene.objects]
    bank = build_bank(objects, config.concept)
    stats = ConstructionStats()
    conceptual = [
        build_conceptual_scene(scene, bank, config.concept, stats)
        for scene in train_scenes
    ]
    return bank, conceptual, construction_report(bank, stats)


def run_build_concept(config: PipelineConfig, ws: Workspace) -> dict:
    train = read_split(ws.split_dir("train"))
    bank, conceptual, report = build_concept_stage(train, config)
    ws.concept_dir.mkdir(parents=True, exist_ok=True)
    save_bank(bank, ws.bank_path)
    write_split(conceptual, ws.conceptual_dir("train"))
    ws.concept_report_path.write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    return report


# ---------------------------------------------------------------------------
# Stage: training
# ---------------------------------------------------------------------------

def make_examples(scenes, config: PipelineConfig, conceptual=None):
    """Precompute BEV tensors and anchor targets once per scene."""
    anchors = AnchorGrid(config.grid, config.anchors)
    paired = {s.scene_id: s for s in conceptual} if conceptual is not None else {}
    return [
        prepare_example(
            scene,
            config.grid,
            anchors,
            pos_thr=config.pos_threshold,
            neg_thr=config.neg_threshold,
            conceptual=paired.get(scene.scene_id),
        )
        for scene in scenes
    ]


TRAIN_PHASES = ("cfg", "baseline", "ago")


def run_train(config: PipelineConfig, ws: Workspace, phase: str,
              seed: int | None = None) -> dict:
    """Train one phase from the on-disk dataset and write checkpoint + log.

    ``cfg`` trains on the conceptual twins, ``baseline`` on the raw scenes,
    and ``ago`` on raw scenes guided by the frozen ``cfg`` checkpoint (which
    must exist).
    """
    if phase not in TRAIN_PHASES:
        raise ValueError(f"unknown phase {phase!r}; expected one of {TRAIN_PHASES}")
    spec = config.net_spec()
    tc = config.train_config(seed=seed)
    if phase == "cfg":
        scenes = read_split(ws.conceptual_dir("train"))
        params, history = train_cfg(make_examples(scenes, config), spec, tc)
    elif phase == "baseline":
        scenes = read_split(ws.split_dir("train"))
        params, history = train_baseline(make_examples(scenes, config), spec, tc)
    else:
        cfg_path = ws.checkpoint_path("cfg")
        if not cfg_path.exists():
            raise FileNotFoundError(
                f"phase 'ago' needs the frozen conceptual checkpoint at {cfg_path}; "
                f"run train --phase cfg first"
            )
        cfg_params, _ = load_checkpoint(cfg_path)
        perceptual = read_split(ws.split_dir("train"))
        conceptual = read_split(ws.conceptual_dir("train"))
        examples = make_examples(perceptual, config, conceptual)
        params, history = train_ago(examples, cfg_params, spec, tc)
    ckpt = ws.checkpoint_path(phase)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, ckpt, extra={"phase": phase, "seed": tc.seed})
    log = ws.log_path(phase)
    log.parent.mkdir(parents=True, exist_ok=True)
    write_train_log(history, log)
    return {
        "phase": phase,
        "steps": len(history),
        "final_loss": history[-1]["loss"],
        "checkpoint": str(ckpt),
        "log": str(log),
    }


# ---------------------------------------------------------------------------
# Stage: evaluation
# ---------------------------------------------------------------------------

def predict_scenes(params: NetworkParams, scenes, config: PipelineConfig):
    anchors = AnchorGrid(config.grid, config.anchors)
    return [
        ScenePredictions(
            scene_id=scene.scene_id,
            detections=tuple(
                infer(params, scene, config.grid, anchors,
                      score_threshold=config.score_threshold,
                      nms_iou=config.nms_iou)
            ),
            gts=tuple(scene.objects),
        )
        for scene in scenes
    ]


def evaluate_params(params: NetworkParams, scenes, config: PipelineConfig) -> dict:
    return evaluate(predict_scenes(params, scenes, config), config.eval)


def moderate_ap(report: dict) -> float:
    value = report["difficulty_ap"]["moderate"]
    return 0.0 if value is None else float(value)


def run_eval(config: PipelineConfig, ws: Workspace, checkpoint, split: str = "val",
             conceptual: bool = False, name: str | None = None) -> dict:
    """Evaluate a checkpoint on a split; ``conceptual`` swaps in the
    bank-completed twin of every scene (built on the fly for val)."""
    params, _ = load_checkpoint(checkpoint)
    scenes = read_split(ws.split_dir(split))
    if conceptual:
        if split == "train" and ws.conceptual_dir("train").exists():
            scenes = read_split(ws.conceptual_dir("train"))
        else:
            bank = load_bank(ws.bank_path)
            scenes = [build_conceptual_scene(s, bank, config.concept) for s in scenes]
    report = evaluate_params(params, scenes, config)
    report["split"] = split
    report["domain"] = "conceptual" if conceptual else "perceptual"
    report["checkpoint"] = str(checkpoint)
    if name is None:
        name = f"eval_{Path(checkpoint).stem}_{split}"
        if conceptual:
            name += "_conceptual"
    path = ws.report_path(name)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_report_json(report, path)
    return report


# ---------------------------------------------------------------------------
# Full pipeline and studies
# ---------------------------------------------------------------------------

def run_pipeline(config: PipelineConfig, ws: Workspace, workers: int = 1) -> dict:
    """synth -> build-concept -> train cfg -> train ago -> eval, plus one
    rendered val scene. Every artifact lands under the workspace root."""
    summary: dict = {"synth": run_synth(config, ws, workers)}
    summary["concept"] = run_build_concept(config, ws)
    summary["train_cfg"] = run_train(config, ws, "cfg")
    summary["train_ago"] = run_train(config, ws, "ago")
    report = run_eval(config, ws, ws.checkpoint_path("ago"), "val", name="eval_ago_val")
    summary["eval"] = {
        "difficulty_ap": report["difficulty_ap"],
        "gt_counts": report["gt_counts"],
    }
    val = read_split(ws.split_dir("val"))
    if val:
        scene = val[0]
        params, _ = load_checkpoint(ws.checkpoint_path("ago"))
        anchors = AnchorGrid(config.grid, config.anchors)
        dets = infer(params, scene, config.grid, anchors,
                     score_threshold=config.score_threshold, nms_iou=config.nms_iou)
        ws.render_dir.mkdir(parents=True, exist_ok=True)
        png = ws.render_dir / f"{scene.scene_id}_bev.png"
        occupancy = channel_mean(bev_occupancy(scene.cloud, config.grid))
        render_bev(
            occupancy,
            config.grid,
            png,
            overlays=(
                (scene.boxes, GT_GREEN),
                ([d.box for d in dets], (230, 40, 40)),
            ),
        )
        summary["render"] = str(png)
    path = ws.report_path("summary")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def directional_study(config: PipelineConfig, seeds=(0, 1, 2), workers: int = 1,
                      progress=None) -> dict:
    """Train baseline, association without reweighting, and association with
    reweighting on one dataset, per seed; report mean moderate AP per variant.

    The expected ordering (sc >= no_sc >= baseline) mirrors the two-phase
    ablation this pipeline exists to demonstrate.
    """
    def say(msg):
        if progress:
            progress(msg)

    say("synthesizing dataset")
    train_scenes, val_scenes = synthesize(config.synth, workers)
    say("building conceptual domain")
    _, conceptual, _ = build_concept_stage(train_scenes, config)
    spec = config.net_spec()
    base_examples = make_examples(train_scenes, config)
    paired_examples = make_examples(train_scenes, config, conceptual)
    cfg_examples = make_examples(conceptual, config)

    per_seed: dict[str, list[float]] = {"baseline": [], "ago_no_sc": [], "ago_sc": []}
    for seed in seeds:
        say(f"seed {seed}: training cfg")
        cfg_params, _ = train_cfg(cfg_examples, spec, config.train_config(seed=seed))
        say(f"seed {seed}: training baseline")
        base_params, _ = train_baseline(base_examples, spec, config.train_config(seed=seed))
        say(f"seed {seed}: training ago (no reweight)")
        nosc_params, _ = train_ago(
            paired_examples, cfg_params, spec,
            config.train_config(seed=seed, use_sc=False),
        )
        say(f"seed {seed}: training ago (sc reweight)")
        sc_params, _ = train_ago(
            paired_examples, cfg_params, spec,
            config.train_config(seed=seed, use_sc=True),
        )
        for name, params in (
            ("baseline", base_params),
            ("ago_no_sc", nosc_params),
            ("ago_sc", sc_params),
        ):
            ap = moderate_ap(evaluate_params(params, val_scenes, config))
            per_seed[name].append(ap)
            say(f"seed {seed}: {name} moderate AP {ap:.2f}")
    mean = {name: float(np.mean(vals)) for name, vals in per_seed.items()}
    return {"seeds": list(seeds), "moderate_ap": per_seed, "mean_moderate_ap": mean}


def conceptual_upper_bound(config: PipelineConfig, seed: int | None = None,
                           workers: int = 1, progress=None) -> dict:
    """Train and test on conceptual twins versus the perceptual baseline on
    the same val split; the completed domain should be far easier."""
    def say(msg):
        if progress:
            progress(msg)

    seed = config.seed if seed is None else seed
    say("synthesizing dataset")
    train_scenes, val_scenes = synthesize(config.synth, workers)
    say("building conceptual domain")
    bank, conceptual_train, _ = build_concept_stage(train_scenes, config)
    conceptual_val = [
        build_conceptual_scene(s, bank, config.concept) for s in val_scenes
    ]
    spec = config.net_spec()
    say("training on conceptual scenes")
    c_params, _ = train_cfg(
        make_examples(conceptual_train, config), spec, config.train_config(seed=seed)
    )
    say("training perceptual baseline")
    b_params, _ = train_baseline(
        make_examples(train_scenes, config), spec, config.train_config(seed=seed)
    )
    conceptual_ap = moderate_ap(evaluate_params(c_params, conceptual_val, config))
    baseline_ap = moderate_ap(evaluate_params(b_params, val_scenes, config))
    return {
        "seed": seed,
        "conceptual_moderate_ap": conceptual_ap,
        "baseline_moderate_ap": baseline_ap,
        "margin": conceptual_ap - baseline_ap,
    }
