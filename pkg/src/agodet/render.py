"""BEV heatmap rendering to PNG with box overlays.

Images put +x (forward) toward the top row and +y (left) toward the left
column. A fixed color ramp and nearest-neighbor upscaling keep output bytes
reproducible for golden-file comparisons.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .geometry import Box3D
from .voxel import FeatureMap, GridConfig

GT_GREEN = (0, 220, 60)
BASELINE_YELLOW = (240, 200, 30)
ADAPTED_RED = (230, 40, 40)

# anchor stops of the ramp, low to high
_RAMP = np.array(
    [
        (68, 1, 84),
        (59, 82, 139),
        (33, 145, 140),
        (94, 201, 98),
        (253, 231, 37),
    ],
    dtype=np.float64,
)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map a [0, 1] grid through the fixed ramp to (H, W, 3) uint8."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pos = v * (len(_RAMP) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_RAMP) - 1)
    frac = (pos - lo)[..., None]
    rgb = _RAMP[lo] * (1.0 - frac) + _RAMP[hi] * frac
    return np.round(rgb).astype(np.uint8)


def channel_mean(fmap: FeatureMap) -> np.ndarray:
    """Channel-mean heatmap normalized to [0, 1] (all-zero stays zero)."""
    mean = fmap.data.mean(axis=0)
    peak = mean.max()
    return mean / peak if peak > 0 else mean


def _world_to_px(xy: np.ndarray, grid: GridConfig, scale: int) -> np.ndarray:
    """(N, 2) world xy -> (N, 2) pixel (col, row) for PIL drawing."""
    h, w = grid.bev_shape
    sx = grid.step_x * grid.bev_downsample
    sy = grid.step_y * grid.bev_downsample
    col = (grid.crop.y_max - xy[:, 1]) / sy * scale
    row = (grid.crop.x_max - xy[:, 0]) / sx * scale
    return np.stack([col, row], axis=1)


def render_bev(
    values: np.ndarray,
    grid: GridConfig,
    path,
    overlays=(),
    scale: int = 16,
) -> None:
    """Write a PNG of a (H, W) grid in [0, 1]; ``overlays`` is a sequence of
    (boxes, rgb color) groups drawn as footprint outlines."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != grid.bev_shape:
        raise ValueError(f"grid shape {values.shape} != {grid.bev_shape}")
    rgb = colorize(values)
    # cell (ix, iy) -> pixel block (rows from the top = high x first)
    rgb = rgb[::-1, ::-1]
    img = Image.fromarray(rgb, mode="RGB")
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for boxes, color in overlays:
        for box in boxes:
            corners = np.asarray(box.footprint() if isinstance(box, Box3D) else box)
            px = _world_to_px(corners, grid, scale)
            pts = [tuple(p) for p in px] + [tuple(px[0])]
            draw.line(pts, fill=tuple(color), width=max(scale // 8, 1))
    img.save(path, format="PNG")


def render_feature_map(fmap: FeatureMap, grid: GridConfig, path,
                       overlays=(), scale: int = 16) -> None:
    render_bev(channel_mean(fmap), grid, path, overlays=overlays, scale=scale)
