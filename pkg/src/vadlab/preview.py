"""Render the views produced by a transform expression as PPM files."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .ppm import read_ppm, write_ppm
from .transforms import parse_view_expression


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "-", text).strip("-") or "view"


def tile_grid(images: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Lay images side by side on a white background (heights may differ)."""
    h = max(im.shape[1] for im in images)
    w = sum(im.shape[2] for im in images) + gap * (len(images) - 1)
    grid = np.ones((3, h, w), dtype=np.float32)
    x = 0
    for im in images:
        grid[:, : im.shape[1], x: x + im.shape[2]] = im
        x += im.shape[2] + gap
    return grid


def render_preview(expr: str, input_path: str | os.PathLike, out_dir: str | os.PathLike,
                   grid: bool = False) -> list[Path]:
    """Write one PPM per view (``view_00_<name>.ppm`` ...) and optionally ``grid.ppm``."""
    transforms = parse_view_expression(expr)
    img = read_ppm(input_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, rendered = [], []
    for j, t in enumerate(transforms):
        view = np.asarray(t(img), dtype=np.float32)
        p = out / f"view_{j:02d}_{_slug(t.describe())}.ppm"
        write_ppm(p, view)
        paths.append(p)
        rendered.append(view)
    if grid:
        write_ppm(out / "grid.ppm", tile_grid(rendered))
        paths.append(out / "grid.ppm")
    return paths
