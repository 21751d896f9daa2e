"""Attention heatmaps and match overlays."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from siftsup.errors import IndexOutOfRange
from siftsup.imgproc import RgbImage
from siftsup.loss import AttentionTensor
from siftsup.matching import MatchPair
from siftsup.refattn import GridSpec
from siftsup.sift import Keypoint

logger = logging.getLogger("siftsup.viz")

DEFAULT_COLORMAP = "gray"
LINE_COLORMAP = "tab20"


def heatmap_values(attn: AttentionTensor, query: int, key_grid: GridSpec) -> np.ndarray:
    """Layer/head-averaged attention row of *query* on the key grid, min-max scaled to [0, 1].

    A constant row maps to 0.5 everywhere.
    """
    if not 0 <= query < attn.num_queries:
        raise IndexOutOfRange(f"query {query} outside [0, {attn.num_queries})")
    if key_grid.size != attn.num_keys:
        raise IndexOutOfRange(f"key grid has {key_grid.size} cells, attention has {attn.num_keys} keys")
    row = attn.weights[:, :, query, :].mean(axis=(0, 1)).reshape(key_grid.grid_h, key_grid.grid_w)
    lo, hi = row.min(), row.max()
    if hi <= lo:
        return np.full(row.shape, 0.5)
    return (row - lo) / (hi - lo)


def colorize(values: np.ndarray, colormap: str = DEFAULT_COLORMAP) -> np.ndarray:
    rgba = colormaps[colormap](values)
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def emit_heatmaps(
    attn: AttentionTensor,
    query_indices: list[int],
    key_grid: GridSpec,
    out_dir: str | Path,
    colormap: str = DEFAULT_COLORMAP,
    cell_px: int = 16,
) -> list[Path]:
    """Write one PNG per query: its attention over the key grid, each cell *cell_px* pixels wide."""
    for i in query_indices:
        if not 0 <= i < attn.num_queries:
            raise IndexOutOfRange(f"query {i} outside [0, {attn.num_queries})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    written = []
    for i in query_indices:
        pixels = colorize(heatmap_values(attn, i, key_grid), colormap)
        img = Image.fromarray(pixels).resize(
            (key_grid.grid_w * cell_px, key_grid.grid_h * cell_px), Image.Resampling.NEAREST
        )
        info = PngInfo()
        info.add_text("colormap", colormap)
        info.add_text("query", str(i))
        path = out / f"query_{i:05d}.png"
        img.save(path, format="PNG", pnginfo=info)
        written.append(path)
    logger.debug("wrote %d heatmaps to %s", len(written), out)
    return written


def line_color(index: int) -> tuple[int, int, int]:
    r, g, b, _ = colormaps[LINE_COLORMAP](index % 20)
    return round(r * 255), round(g * 255), round(b * 255)


def render_overlay(
    garment: RgbImage,
    person: RgbImage,
    matches: list[MatchPair],
    kps_g: list[Keypoint],
    kps_p: list[Keypoint],
) -> RgbImage:
    """Garment on the left, person on the right, one line per match between keypoint positions."""
    height = max(garment.height, person.height)
    canvas = Image.new("RGB", (garment.width + person.width, height))
    canvas.paste(Image.fromarray(garment.data), (0, 0))
    canvas.paste(Image.fromarray(person.data), (garment.width, 0))

    draw = ImageDraw.Draw(canvas)
    for k, m in enumerate(matches):
        g, p = kps_g[m.garment_idx], kps_p[m.person_idx]
        draw.line([(g.x, g.y), (p.x + garment.width, p.y)], fill=line_color(k), width=1)
    return RgbImage(np.asarray(canvas).copy())
