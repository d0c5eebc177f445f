"""Command line entry points.

Subcommands: synth, build-concept, train, eval, render-bev. All randomness
flows from the config seed (overridable with --seed); every command exits
nonzero on error and zero on success.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, loads_config
from .evalap import format_report_text
from .experiment import (
    TRAIN_PHASES,
    Workspace,
    run_build_concept,
    run_eval,
    run_pipeline,
    run_synth,
    run_train,
)
from .losses import AnchorGrid, init_cr_params, sc_reweight
from .net import forward, infer, load_checkpoint
from .render import ADAPTED_RED, BASELINE_YELLOW, GT_GREEN, channel_mean, render_bev
from .scene_io import load_scene
from .voxel import bev_occupancy, foreground_mask


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agodet",
        description="association-guided 3D detection pipeline (desk scale)",
    )
    parser.add_argument("--config", type=Path, default=None,
                        help="pipeline config file (defaults used if omitted)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker pool size for scene generation")
    parser.add_argument("--out", type=Path, default=None,
                        help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate the synthetic dataset")

    sub.add_parser("build-concept",
                   help="build the model bank and conceptual twin scenes")

    p_train = sub.add_parser("train", help="train one phase")
    p_train.add_argument("--phase", choices=TRAIN_PHASES, required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--split", choices=("train", "val"), default="val")
    p_eval.add_argument("--conceptual", action="store_true",
                        help="evaluate on the conceptual twins of the split")

    p_render = sub.add_parser("render-bev", help="render a scene or feature map")
    p_render.add_argument("--scene", type=Path, required=True,
                          help="scene container (.agof)")
    p_render.add_argument("--map", dest="map_kind", default="occupancy",
                          choices=("occupancy", "class", "box", "reweight"))
    p_render.add_argument("--checkpoint", type=Path, default=None,
                          help="network checkpoint (class/box/reweight maps, red boxes)")
    p_render.add_argument("--cfg-checkpoint", type=Path, default=None,
                          help="frozen conceptual checkpoint (reweight map)")
    p_render.add_argument("--baseline-checkpoint", type=Path, default=None,
                          help="extra checkpoint drawn in yellow")
    p_render.add_argument("--png", type=Path, default=None,
                          help="output path (default: <out>/renders/<scene>_<map>.png)")

    p_all = sub.add_parser("run", help="full pipeline: synth through eval")
    _ = p_all
    return parser


def _load_pipeline_config(args):
    overrides: dict[tuple[str, str], str] = {}
    if args.seed is not None:
        overrides[("pipeline", "seed")] = str(args.seed)
    if args.out is not None:
        overrides[("pipeline", "out")] = str(args.out)
    if args.config is not None:
        return load_config(args.config, overrides)
    return loads_config("", overrides=overrides)


def _detections_for(checkpoint: Path, scene, config):
    params, _ = load_checkpoint(checkpoint)
    anchors = AnchorGrid(config.grid, config.anchors)
    return [
        d.box
        for d in infer(params, scene, config.grid, anchors,
                       score_threshold=config.score_threshold,
                       nms_iou=config.nms_iou)
    ]


def _cmd_render(args, config, ws: Workspace) -> int:
    scene = load_scene(args.scene)
    grid = config.grid
    occupancy = bev_occupancy(scene.cloud, grid)
    kind = args.map_kind
    if kind == "occupancy":
        values = channel_mean(occupancy)
    else:
        if args.checkpoint is None:
            raise ValueError(f"--map {kind} needs --checkpoint")
        params, _ = load_checkpoint(args.checkpoint)
        out = forward(params, occupancy, need_tape=False)
        if kind == "class":
            values = channel_mean(out.f_class)
        elif kind == "box":
            values = channel_mean(out.f_box)
        else:
            if args.cfg_checkpoint is None:
                raise ValueError("--map reweight needs --cfg-checkpoint")
            cfg_params, _ = load_checkpoint(args.cfg_checkpoint)
            cout = forward(cfg_params, occupancy, domain="conceptual",
                           need_tape=False)
            cr_rng = np.random.default_rng(
                np.random.SeedSequence(config.seed).spawn(3)[2]
            )
            cr = init_cr_params(params.spec.feat_channels, cr_rng)
            fg = foreground_mask(scene.boxes, grid)
            reweight = sc_reweight(out.f_class, cout.f_class, fg, cr)
            values = channel_mean(reweight)
    overlays = [(scene.boxes, GT_GREEN)]
    if args.baseline_checkpoint is not None:
        overlays.append((_detections_for(args.baseline_checkpoint, scene, config),
                         BASELINE_YELLOW))
    if args.checkpoint is not None:
        overlays.append((_detections_for(args.checkpoint, scene, config),
                         ADAPTED_RED))
    png = args.png
    if png is None:
        ws.render_dir.mkdir(parents=True, exist_ok=True)
        png = ws.render_dir / f"{args.scene.stem}_{kind}.png"
    else:
        png.parent.mkdir(parents=True, exist_ok=True)
    render_bev(values, grid, png, overlays=tuple(overlays))
    print(png)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_pipeline_config(args)
        ws = Workspace(config.out_dir)
        if args.command == "synth":
            summary = run_synth(config, ws, workers=args.workers)
            print(f"wrote {summary['train_scenes']} train / "
                  f"{summary['val_scenes']} val scenes to {ws.dataset_dir}")
        elif args.command == "build-concept":
            report = run_build_concept(config, ws)
            print(f"bank of {report['model_count']} models; "
                  f"completed {report['completed_objects']} objects "
                  f"(skipped {report['skipped_objects']})")
        elif args.command == "train":
            summary = run_train(config, ws, args.phase)
            print(f"{summary['phase']}: {summary['steps']} steps, "
                  f"final loss {summary['final_loss']:.4f} -> {summary['checkpoint']}")
        elif args.command == "eval":
            report = run_eval(config, ws, args.checkpoint, args.split,
                              conceptual=args.conceptual)
            print(format_report_text(report))
        elif args.command == "render-bev":
            return _cmd_render(args, config, ws)
        elif args.command == "run":
            summary = run_pipeline(config, ws, workers=args.workers)
            ap = summary["eval"]["difficulty_ap"]
            print(f"pipeline complete; moderate AP "
                  f"{ap['moderate'] if ap['moderate'] is not None else 'n/a'}")
        else:  # pragma: no cover - argparse enforces choices
            parser.error(f"unknown command {args.command}")
    except (ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
