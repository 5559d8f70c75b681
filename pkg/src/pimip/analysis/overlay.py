"""Render analysis results as RGBA Deep-Zoom tiles.

Overlay tiles share the image tiles' addressing and dimensions at every
level, so a viewer can stack them 1:1. Class pixels draw at alpha 128;
everything else stays fully transparent. Detected points draw as small
opaque discs.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from ..errors import BadParams
from ..tiler import DeepZoomLayout, dz_level_dims, dz_max_level, tile_rect

OVERLAY_ALPHA = 128
POINT_RADIUS = 3
MASK_COLOR = "#3cb44bff"
POINT_COLOR = "#e6194bff"


def parse_color(value: str) -> tuple:
    """"#rrggbb" or "#rrggbbaa" to an (r, g, b, a) tuple."""
    s = str(value).strip().lstrip("#")
    if len(s) == 6:
        s += "ff"
    if len(s) != 8:
        raise BadParams(f"color {value!r}")
    try:
        return tuple(int(s[i : i + 2], 16) for i in range(0, 8, 2))
    except ValueError as exc:
        raise BadParams(f"color {value!r}") from exc


def encode_rgba_png(rgba: np.ndarray) -> bytes:
    out = io.BytesIO()
    Image.fromarray(rgba, mode="RGBA").save(out, format="PNG", compress_level=1)
    return out.getvalue()


def _base_centers(rect, scale, width, height):
    """Base-pixel sampling centers for each tile pixel, clamped to bounds."""
    xs = np.minimum(
        (np.arange(rect.x, rect.x + rect.w, dtype=np.int64)) * scale + scale // 2,
        width - 1,
    )
    ys = np.minimum(
        (np.arange(rect.y, rect.y + rect.h, dtype=np.int64)) * scale + scale // 2,
        height - 1,
    )
    return xs, ys


def _mask_tile(mask, rect, scale, width, height, color) -> np.ndarray:
    xs, ys = _base_centers(rect, scale, width, height)
    mx, my, mw, mh = mask.bounds
    inside_x = (xs >= mx) & (xs < mx + mw)
    inside_y = (ys >= my) & (ys < my + mh)
    sample_x = np.clip(xs - mx, 0, mw - 1)
    sample_y = np.clip(ys - my, 0, mh - 1)
    grid = mask.to_array()[np.ix_(sample_y, sample_x)]
    hit = grid & inside_y[:, None] & inside_x[None, :]
    rgba = np.zeros((rect.h, rect.w, 4), dtype=np.uint8)
    r, g, b, _ = parse_color(color)
    rgba[hit] = (r, g, b, OVERLAY_ALPHA)
    return rgba


def _grid_tile(grid, rect, scale, width, height) -> np.ndarray:
    xs, ys = _base_centers(rect, scale, width, height)
    wxs = (xs * grid.level_width) // width
    wys = (ys * grid.level_height) // height
    cx = np.minimum(wxs // grid.grid_size, grid.cols - 1)
    cy = np.minimum(wys // grid.grid_size, grid.rows - 1)
    ids = grid.to_array()[np.ix_(cy, cx)]
    rgba = np.zeros((rect.h, rect.w, 4), dtype=np.uint8)
    for k in np.unique(ids):
        if k == 0:
            continue
        r, g, b, _ = parse_color(grid.palette.get(int(k), MASK_COLOR))
        rgba[ids == k] = (r, g, b, OVERLAY_ALPHA)
    return rgba


def _points_tile(points, rect, scale, color) -> np.ndarray:
    rgba = np.zeros((rect.h, rect.w, 4), dtype=np.uint8)
    r, g, b, _ = parse_color(color)
    yy, xx = np.mgrid[0 : rect.h, 0 : rect.w]
    for bx, by in points:
        lx = bx / scale - rect.x
        ly = by / scale - rect.y
        if -POINT_RADIUS <= lx < rect.w + POINT_RADIUS and \
           -POINT_RADIUS <= ly < rect.h + POINT_RADIUS:
            disc = (xx - lx) ** 2 + (yy - ly) ** 2 <= POINT_RADIUS**2
            rgba[disc] = (r, g, b, 255)
    return rgba


def render_overlay(result: dict, slide_dims: tuple, dz_level: int, col: int,
                   row: int, layout: DeepZoomLayout | None = None) -> bytes:
    """One RGBA PNG tile of a result, aligned with the image tile grid."""
    layout = layout or DeepZoomLayout()
    width, height = slide_dims
    dims = dz_level_dims(width, height, dz_level)
    rect = tile_rect(dz_level, col, row, layout, dims)
    scale = 1 << (dz_max_level(width, height) - dz_level)
    kind = result.get("kind")
    if kind == "mask":
        rgba = _mask_tile(result["mask"], rect, scale, width, height,
                          result.get("color", MASK_COLOR))
    elif kind == "grid_labels":
        rgba = _grid_tile(result["grid"], rect, scale, width, height)
    elif kind == "points":
        rgba = _points_tile(result["points"], rect, scale,
                            result.get("color", POINT_COLOR))
    else:
        raise BadParams(f"overlay for result kind {kind!r}")
    return encode_rgba_png(rgba)
