"""Human-editable pipeline configuration.

One INI-style file (sections, ``key = value`` lines, ``#`` comments) is
schema-validated with line-precise errors, then lowered into the typed
configs the modules consume. ``configparser`` is not used because it cannot
report the offending line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .concept import CompletionStrategy, ConstructionConfig
from .evalap import EvalConfig, MatchMetric, RecallMode
from .losses import AnchorSpec
from .net import NetSpec, TrainConfig
from .scene_io import CropRange
from .synth import SyntheticSpec
from .voxel import GridConfig


class ConfigError(ValueError):
    """Malformed configuration; message carries path and line."""


# section -> key -> (type tag, default). Types: int, float, bool, str, buckets.
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "pipeline": {
        "seed": ("int", 0),
        "out": ("str", "out"),
    },
    "crop": {
        "x_min": ("float", 0.0),
        "x_max": ("float", 8.0),
        "y_min": ("float", -4.0),
        "y_max": ("float", 4.0),
        "z_min": ("float", -1.0),
        "z_max": ("float", 3.0),
    },
    "grid": {
        "step_x": ("float", 0.5),
        "step_y": ("float", 0.5),
        "step_z": ("float", 0.5),
        "bev_downsample": ("int", 1),
    },
    "synth": {
        "train_scenes": ("int", 200),
        "val_scenes": ("int", 100),
        "min_objects": ("int", 2),
        "max_objects": ("int", 5),
        "base_density": ("float", 900.0),
        "ground_points": ("float", 400.0),
        "noise_sigma": ("float", 0.01),
        "sensor_height": ("float", 2.0),
        "width_min": ("float", 1.4),
        "width_max": ("float", 1.8),
        "length_min": ("float", 3.4),
        "length_max": ("float", 4.4),
        "height_min": ("float", 1.35),
        "height_max": ("float", 1.75),
        "yaw_min": ("float", -math.pi),
        "yaw_max": ("float", math.pi),
        "easy_min_points": ("int", 60),
        "mod_min_points": ("int", 25),
        "hard_min_points": ("int", 5),
    },
    "concept": {
        "group_count": ("int", 24),
        "selection_percent": ("float", 20.0),
        "removal_radius": ("float", 0.25),
        "strategy": ("str", "add_with_removal"),
        "min_model_points": ("int", 5),
    },
    "anchors": {
        "width": ("float", 1.6),
        "length": ("float", 3.9),
        "height": ("float", 1.56),
        "z_center": ("float", 0.78),
    },
    "net": {
        "hidden": ("int", 16),
        "feat_channels": ("int", 16),
        "dual_branch": ("bool", True),
    },
    "train": {
        "epochs": ("int", 60),
        "batch_size": ("int", 2),
        "base_lr": ("float", 0.1),
        "momentum": ("float", 0.9),
        "sigma": ("float", 1.0),
        "use_sc": ("bool", True),
        "pos_threshold": ("float", 0.6),
        "neg_threshold": ("float", 0.45),
        "augment": ("bool", False),
        "augment_samples": ("int", 2),
    },
    "eval": {
        "iou_threshold": ("float", 0.5),
        "recall_mode": ("str", "r40"),
        "match_metric": ("str", "bev"),
        "range_buckets": ("buckets", ()),
        "score_threshold": ("float", 0.3),
        "nms_iou": ("float", 0.1),
    },
}


def _convert(raw: str, tag: str, where: str):
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"expected true/false, got {raw!r}")
        if tag == "buckets":
            if not raw:
                return ()
            out = []
            for part in raw.split(","):
                lo, _, hi = part.partition(":")
                out.append((float(lo), float(hi)))
            return tuple(out)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_text(text: str, path: str) -> dict[str, dict[str, tuple[str, int]]]:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{path}:{lineno}: unterminated section header")
            name = stripped[1:-1].strip()
            if name not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown section [{name}]")
            if name in sections:
                raise ConfigError(f"{path}:{lineno}: duplicate section [{name}]")
            sections[name] = {}
            current = name
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside any section")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _SCHEMA[current]:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{current}]")
        if key in sections[current]:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (value.strip(), lineno)
    return sections


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run needs, lowered from one config file."""

    seed: int
    out_dir: Path
    crop: CropRange
    grid: GridConfig
    synth: SyntheticSpec
    concept: ConstructionConfig
    anchors: AnchorSpec
    net_hidden: int
    net_feat_channels: int
    net_dual_branch: bool
    train_epochs: int
    train_batch_size: int
    train_base_lr: float
    train_momentum: float
    train_sigma: float
    train_use_sc: bool
    pos_threshold: float
    neg_threshold: float
    augment: bool
    augment_samples: int
    eval: EvalConfig
    score_threshold: float
    nms_iou: float

    def net_spec(self) -> NetSpec:
        return NetSpec(
            in_channels=self.grid.dims[2],
            hidden=self.net_hidden,
            feat_channels=self.net_feat_channels,
            anchors_per_cell=2,
            dual_branch=self.net_dual_branch,
        )

    def train_config(self, seed: int | None = None, sigma: float | None = None,
                     use_sc: bool | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.train_epochs,
            batch_size=self.train_batch_size,
            base_lr=self.train_base_lr,
            momentum=self.train_momentum,
            sigma=self.train_sigma if sigma is None else sigma,
            use_sc=self.train_use_sc if use_sc is None else use_sc,
            seed=self.seed if seed is None else seed,
        )


def _build(values: dict[str, dict[str, object]], lines, path: str) -> PipelineConfig:
    def where(section, key):
        ln = lines.get(section, {}).get(key)
        return f"{path}:{ln}: [{section}] {key}" if ln else f"{path}: [{section}] {key}"

    v = values
    try:
        crop = CropRange(
            v["crop"]["x_min"], v["crop"]["x_max"],
            v["crop"]["y_min"], v["crop"]["y_max"],
            v["crop"]["z_min"], v["crop"]["z_max"],
        )
    except ValueError as exc:
        raise ConfigError(f"{where('crop', 'x_min')}: {exc}") from None
    try:
        grid = GridConfig(
            crop, v["grid"]["step_x"], v["grid"]["step_y"], v["grid"]["step_z"],
            v["grid"]["bev_downsample"],
        )
    except ValueError as exc:
        raise ConfigError(f"{where('grid', 'bev_downsample')}: {exc}") from None
    s = v["synth"]
    try:
        synth = SyntheticSpec(
            train_scenes=s["train_scenes"], val_scenes=s["val_scenes"],
            min_objects=s["min_objects"], max_objects=s["max_objects"],
            base_density=s["base_density"], ground_points=s["ground_points"],
            noise_sigma=(s["noise_sigma"],) * 3,
            sensor_height=s["sensor_height"],
            width_range=(s["width_min"], s["width_max"]),
            length_range=(s["length_min"], s["length_max"]),
            height_range=(s["height_min"], s["height_max"]),
            yaw_range=(s["yaw_min"], s["yaw_max"]),
            easy_min_points=s["easy_min_points"],
            mod_min_points=s["mod_min_points"],
            hard_min_points=s["hard_min_points"],
            crop=crop,
            seed=v["pipeline"]["seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"{where('synth', 'base_density')}: {exc}") from None
    strategy_raw = v["concept"]["strategy"]
    try:
        strategy = CompletionStrategy(strategy_raw)
    except ValueError:
        raise ConfigError(
            f"{where('concept', 'strategy')}: unknown strategy {strategy_raw!r} "
            f"(expected add_with_removal or replace)"
        ) from None
    try:
        concept = ConstructionConfig(
            group_count=v["concept"]["group_count"],
            selection_percent=v["concept"]["selection_percent"],
            removal_radius=v["concept"]["removal_radius"],
            strategy=strategy,
            min_model_points=v["concept"]["min_model_points"],
        )
    except ValueError as exc:
        raise ConfigError(f"{where('concept', 'group_count')}: {exc}") from None
    try:
        anchors = AnchorSpec(
            width=v["anchors"]["width"], length=v["anchors"]["length"],
            height=v["anchors"]["height"], z_center=v["anchors"]["z_center"],
        )
    except ValueError as exc:
        raise ConfigError(f"{where('anchors', 'width')}: {exc}") from None
    t = v["train"]
    if not 0.0 <= t["neg_threshold"] <= t["pos_threshold"] <= 1.0:
        raise ConfigError(
            f"{where('train', 'neg_threshold')}: need 0 <= neg <= pos <= 1, "
            f"got {t['neg_threshold']} / {t['pos_threshold']}"
        )
    e = v["eval"]
    try:
        mode = RecallMode(e["recall_mode"])
    except ValueError:
        raise ConfigError(
            f"{where('eval', 'recall_mode')}: expected r11 or r40, got {e['recall_mode']!r}"
        ) from None
    try:
        metric = MatchMetric(e["match_metric"])
    except ValueError:
        raise ConfigError(
            f"{where('eval', 'match_metric')}: expected bev or 3d, got {e['match_metric']!r}"
        ) from None
    try:
        eval_cfg = EvalConfig(
            iou_threshold=e["iou_threshold"], recall_mode=mode,
            match_metric=metric, range_buckets=e["range_buckets"],
        )
    except ValueError as exc:
        raise ConfigError(f"{where('eval', 'iou_threshold')}: {exc}") from None
    if not 0.0 < e["score_threshold"] < 1.0:
        raise ConfigError(f"{where('eval', 'score_threshold')}: must be in (0, 1)")
    if not 0.0 < e["nms_iou"] <= 1.0:
        raise ConfigError(f"{where('eval', 'nms_iou')}: must be in (0, 1]")
    return PipelineConfig(
        seed=v["pipeline"]["seed"],
        out_dir=Path(v["pipeline"]["out"]),
        crop=crop,
        grid=grid,
        synth=synth,
        concept=concept,
        anchors=anchors,
        net_hidden=v["net"]["hidden"],
        net_feat_channels=v["net"]["feat_channels"],
        net_dual_branch=v["net"]["dual_branch"],
        train_epochs=t["epochs"],
        train_batch_size=t["batch_size"],
        train_base_lr=t["base_lr"],
        train_momentum=t["momentum"],
        train_sigma=t["sigma"],
        train_use_sc=t["use_sc"],
        pos_threshold=t["pos_threshold"],
        neg_threshold=t["neg_threshold"],
        augment=t["augment"],
        augment_samples=t["augment_samples"],
        eval=eval_cfg,
        score_threshold=e["score_threshold"],
        nms_iou=e["nms_iou"],
    )


def loads_config(text: str, path: str = "<config>",
                 overrides: dict[tuple[str, str], str] | None = None) -> PipelineConfig:
    """Parse and lower config text. ``overrides`` maps (section, key) to a
    raw value string applied on top of the file (command line wins)."""
    parsed = _parse_text(text, path)
    for (section, key), raw in (overrides or {}).items():
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"<override>: unknown key [{section}] {key}")
        parsed.setdefault(section, {})[key] = (raw, 0)
    values: dict[str, dict[str, object]] = {}
    lines: dict[str, dict[str, int]] = {}
    for section, keys in _SCHEMA.items():
        values[section] = {}
        lines[section] = {}
        for key, (tag, default) in keys.items():
            if section in parsed and key in parsed[section]:
                raw, lineno = parsed[section][key]
                lines[section][key] = lineno
                where = (f"{path}:{lineno}: [{section}] {key}" if lineno
                         else f"<override>: [{section}] {key}")
                values[section][key] = _convert(raw, tag, where)
            else:
                values[section][key] = default
    return _build(values, lines, path)


def load_config(path, overrides: dict[tuple[str, str], str] | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return loads_config(text, str(path), overrides)


def default_config(seed: int | None = None, out: str | None = None) -> PipelineConfig:
    overrides: dict[tuple[str, str], str] = {}
    if seed is not None:
        overrides[("pipeline", "seed")] = str(seed)
    if out is not None:
        overrides[("pipeline", "out")] = str(out)
    return loads_config("", overrides=overrides)


def config_template() -> str:
    """A fully commented config with every key at its default."""
    out = ["# pipeline configuration (all values shown are the defaults)"]
    for section, keys in _SCHEMA.items():
        out.append("")
        out.append(f"[{section}]")
        for key, (tag, default) in keys.items():
            if tag == "buckets":
                rendered = ", ".join(f"{a:g}:{b:g}" for a, b in default)
            elif isinstance(default, bool):
                rendered = "true" if default else "false"
            else:
                rendered = f"{default}"
            out.append(f"{key} = {rendered}")
    return "\n".join(out) + "\n"
