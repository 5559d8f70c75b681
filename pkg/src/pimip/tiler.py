"""Deep-Zoom pyramid math, pyramid construction and tile rendering.

Deep-Zoom levels run 0..max_level where max_level = ceil(log2(max(w, h)))
and level L has scale 2^(L - max_level). Internal storage numbers levels
the other way (0 = base, ascending downsample); the mapping between the
two happens here and never leaks into storage.

Downsampling is an exact box filter: each output pixel is the arithmetic
mean of its 2x2 source block (smaller at odd edges), rounded half away
from zero. This is reproducible by an independent scalar oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    IoFailure,
    LevelOutOfRange,
    StopExceedsBase,
    TileOutOfRange,
    UnknownStop,
    UnsupportedFormat,
)
from .geometry import Rect
from .pixels import ENCODE_FORMATS, PixelBuffer, buffer_from_array, encode_image
from .slide_io.pyramid import (
    LevelInfo,
    PyramidDescriptor,
    PyramidDirReader,
    SlideReader,
    write_manifest,
)

DZI_TEMPLATE = (
    '<?xml version="1.0" encoding="UTF-8"?>'
    '<Image xmlns="http://schemas.microsoft.com/deepzoom/2008" '
    'Format="{fmt}" Overlap="{overlap}" TileSize="{tilesize}">'
    '<Size Width="{w}" Height="{h}"/></Image>'
)

STORAGE_TILE_SIZE = 256  # internal tiles: aligned, no overlap


@dataclass(frozen=True)
class DeepZoomLayout:
    """Wire-format tiling parameters (defaults match stock viewers)."""

    tile_size: int = 254
    overlap: int = 1
    format: str = "png"

    def __post_init__(self):
        if self.tile_size < 1 or self.overlap not in (0, 1):
            raise ValueError(f"bad layout {self.tile_size}/{self.overlap}")


@dataclass(frozen=True)
class MagnificationMap:
    base_magnification: float
    named_stops: dict = field(default_factory=lambda: {"low": 20.0, "high": 40.0})


def dz_level_count(width: int, height: int) -> int:
    """Number of Deep-Zoom levels: ceil(log2(max(w, h))) + 1."""
    if width < 1 or height < 1:
        raise ValueError(f"dims {width}x{height}")
    return (max(width, height) - 1).bit_length() + 1


def dz_max_level(width: int, height: int) -> int:
    return dz_level_count(width, height) - 1


def dz_level_dims(width: int, height: int, dz_level: int) -> tuple[int, int]:
    """Level dims under scale 2^(max_level - dz_level), exact integer ceil."""
    max_level = dz_max_level(width, height)
    if not 0 <= dz_level <= max_level:
        raise LevelOutOfRange(f"deep-zoom level {dz_level} of 0..{max_level}")
    scale = 1 << (max_level - dz_level)
    return -(-width // scale), -(-height // scale)


def dz_tile_grid(level_dims: tuple[int, int], tile_size: int) -> tuple[int, int]:
    lw, lh = level_dims
    return -(-lw // tile_size), -(-lh // tile_size)


def tile_rect(
    dz_level: int, col: int, row: int, layout: DeepZoomLayout,
    level_dims: tuple[int, int],
) -> Rect:
    """Pixel rect of one Deep-Zoom tile within its level image."""
    lw, lh = level_dims
    cols, rows = dz_tile_grid(level_dims, layout.tile_size)
    if not (0 <= col < cols and 0 <= row < rows):
        raise TileOutOfRange(
            f"tile ({col},{row}) outside grid {cols}x{rows} at level {dz_level}"
        )
    ts, ov = layout.tile_size, layout.overlap
    x = col * ts - (ov if col > 0 else 0)
    y = row * ts - (ov if row > 0 else 0)
    w = ts + (ov if col > 0 else 0) + (ov if col < cols - 1 else 0)
    h = ts + (ov if row > 0 else 0) + (ov if row < rows - 1 else 0)
    return Rect(x, y, min(w, lw - x), min(h, lh - y))


def downsample_2x(buf: PixelBuffer) -> PixelBuffer:
    """Halve both dims by per-channel block means, rounding half away from zero."""
    a = buf.to_array().astype(np.uint32)
    h, w, c = a.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    sums = np.zeros((oh, ow, c), dtype=np.uint32)
    counts = np.zeros((oh, ow, 1), dtype=np.uint32)
    for dy in (0, 1):
        for dx in (0, 1):
            sub = a[dy::2, dx::2]
            sums[: sub.shape[0], : sub.shape[1]] += sub
            counts[: sub.shape[0], : sub.shape[1]] += 1
    out = (2 * sums + counts) // (2 * counts)
    return buffer_from_array(out.astype(np.uint8))


def resize_box(buf: PixelBuffer, out_w: int, out_h: int) -> PixelBuffer:
    """Area-mean downscale to arbitrary dims (same rounding rule)."""
    if (out_w, out_h) == (buf.width, buf.height):
        return buf
    a = buf.to_array().astype(np.int64)
    h, w, c = a.shape
    ys = [(yy * h) // out_h for yy in range(out_h + 1)]
    xs = [(xx * w) // out_w for xx in range(out_w + 1)]
    csum = np.zeros((h + 1, w + 1, c), dtype=np.int64)
    csum[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    out = np.empty((out_h, out_w, c), dtype=np.uint8)
    for yy in range(out_h):
        y0, y1 = ys[yy], max(ys[yy + 1], ys[yy] + 1)
        row = csum[y1, 1:] - csum[y0, 1:]
        row_lo = csum[y1, :-1] - csum[y0, :-1]
        for xx in range(out_w):
            x0, x1 = xs[xx], max(xs[xx + 1], xs[xx] + 1)
            s = row[x1 - 1] - row_lo[x0]
            cnt = (y1 - y0) * (x1 - x0)
            out[yy, xx] = (2 * s + cnt) // (2 * cnt)
    return buffer_from_array(out)


def build_pyramid(
    base: PixelBuffer,
    out_path,
    tile_size: int = STORAGE_TILE_SIZE,
    fmt: str = "png",
    slide_id: str | None = None,
    base_magnification: float | None = None,
    mpp: float | None = None,
) -> PyramidDescriptor:
    """Write the internal pyramid (all levels from base down to 1x1).

    Idempotent: same inputs rewrite the same bytes. Edge tiles are stored
    at their natural size (no padding).
    """
    if fmt not in ("png", "jpg"):
        raise UnsupportedFormat(f"storage tile format {fmt!r}")
    out = Path(out_path)
    n_levels = dz_level_count(base.width, base.height)
    levels = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        current = base
        for k in range(n_levels):
            levels.append(LevelInfo(current.width, current.height, float(1 << k)))
            level_dir = out / "levels" / str(k)
            level_dir.mkdir(parents=True, exist_ok=True)
            arr = current.to_array()
            cols, rows = dz_tile_grid((current.width, current.height), tile_size)
            for row in range(rows):
                for col in range(cols):
                    tile = arr[
                        row * tile_size : (row + 1) * tile_size,
                        col * tile_size : (col + 1) * tile_size,
                    ]
                    data = encode_image(buffer_from_array(tile), fmt)
                    (level_dir / f"{col}_{row}.{fmt}").write_bytes(data)
            if k + 1 < n_levels:
                current = downsample_2x(current)
        descriptor = PyramidDescriptor(
            slide_id=slide_id or out.name,
            width=base.width,
            height=base.height,
            levels=tuple(levels),
            tile_size=tile_size,
            overlap=0,
            base_magnification=base_magnification,
            mpp=mpp,
        )
        write_manifest(out, descriptor, fmt)
    except OSError as exc:
        raise IoFailure(f"cannot write pyramid at {out}: {exc}") from exc
    return descriptor


def read_dz_region(reader: SlideReader, dz_level: int, rect: Rect) -> PixelBuffer:
    """Pixels of a rect in Deep-Zoom level coordinates.

    Levels without a stored counterpart (sparse scanner pyramids) derive
    from the next finer level by box halving, which reproduces the
    whole-level iterated-downsample result because edge blocks truncate
    at level bounds exactly as a full-image pass would.
    """
    d = reader.descriptor
    max_level = dz_max_level(d.width, d.height)
    if not 0 <= dz_level <= max_level:
        raise LevelOutOfRange(f"deep-zoom level {dz_level} of 0..{max_level}")
    dims = dz_level_dims(d.width, d.height, dz_level)
    x, y, w, h = (int(v) for v in rect)
    for k, lv in enumerate(d.levels):
        if (lv.width, lv.height) == dims:
            return reader.read_region(k, x, y, w, h)
    pw, ph = dz_level_dims(d.width, d.height, dz_level + 1)
    parent = Rect(x * 2, y * 2, min(w * 2, pw - x * 2), min(h * 2, ph - y * 2))
    return downsample_2x(read_dz_region(reader, dz_level + 1, parent))


def render_tile(
    reader: SlideReader, dz_level: int, col: int, row: int,
    layout: DeepZoomLayout | None = None, fmt: str | None = None,
) -> bytes:
    """Encode one Deep-Zoom tile. PNG output is byte-stable across runs."""
    layout = layout or DeepZoomLayout()
    fmt = (fmt or layout.format).lower()
    if fmt not in ENCODE_FORMATS:
        raise UnsupportedFormat(f"tile format {fmt!r}")
    d = reader.descriptor
    max_level = dz_max_level(d.width, d.height)
    if not 0 <= dz_level <= max_level:
        raise TileOutOfRange(f"deep-zoom level {dz_level} of 0..{max_level}")
    dims = dz_level_dims(d.width, d.height, dz_level)
    rect = tile_rect(dz_level, col, row, layout, dims)
    return encode_image(read_dz_region(reader, dz_level, rect), fmt)


def make_thumbnail(reader: SlideReader, max_dim: int) -> PixelBuffer:
    """Downscale the slide so max(dims) <= max_dim, aspect preserved."""
    if max_dim < 1:
        raise ValueError(f"max_dim {max_dim}")
    d = reader.descriptor
    pick = 0
    for k, lv in enumerate(d.levels):
        if max(lv.width, lv.height) >= max_dim:
            pick = k
        else:
            break
    lw, lh = d.level_dims(pick)
    level = reader.read_region(pick, 0, 0, lw, lh)
    if max(lw, lh) <= max_dim:
        return level
    m = max(lw, lh)
    out_w = max(1, (2 * lw * max_dim + m) // (2 * m))
    out_h = max(1, (2 * lh * max_dim + m) // (2 * m))
    return resize_box(level, out_w, out_h)


def magnification_to_downsample(mag_map: MagnificationMap, stop_name: str) -> float:
    """Downsample factor that puts the viewer at a named magnification stop."""
    if stop_name not in mag_map.named_stops:
        raise UnknownStop(f"no magnification stop {stop_name!r}")
    stop = mag_map.named_stops[stop_name]
    if stop > mag_map.base_magnification:
        raise StopExceedsBase(
            f"stop {stop}x exceeds scan magnification {mag_map.base_magnification}x"
        )
    return mag_map.base_magnification / stop


def dzi_document(width: int, height: int, layout: DeepZoomLayout | None = None) -> str:
    layout = layout or DeepZoomLayout()
    return DZI_TEMPLATE.format(
        fmt=layout.format, overlap=layout.overlap,
        tilesize=layout.tile_size, w=width, h=height,
    )


def open_built_pyramid(path) -> PyramidDirReader:
    return PyramidDirReader(path)
