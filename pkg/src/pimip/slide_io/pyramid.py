"""Uniform random-access region reads over pyramidal slides.

Two storage backends expose one interface: scanner TIFF files (classic or
BigTIFF, tiled) and the internal directory pyramid written by the tiler
(``manifest`` + ``levels/<k>/<col>_<row>.<fmt>``).

Readers are immutable after open; concurrent region reads need no caller
locking (the decoded-tile cache has its own lock).
"""

from __future__ import annotations

import json
import mmap
import re
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..errors import (
    LevelOutOfRange,
    ManifestMismatch,
    MissingManifest,
    TileOutOfRange,
    TruncatedFile,
    UnreadableSource,
    UnsupportedFormat,
    ZeroAreaRect,
)
from ..pixels import PixelBuffer, buffer_from_array, decode_image
from . import tiff

MANIFEST_NAME = "manifest"
_TILE_CACHE_SIZE = 256

_APPMAG_RE = re.compile(r"AppMag\s*=\s*([0-9]+(?:\.[0-9]+)?)")
_MPP_RE = re.compile(r"MPP\s*=\s*([0-9]+(?:\.[0-9]+)?)")


class LevelInfo(NamedTuple):
    width: int
    height: int
    downsample: float


@dataclass(frozen=True)
class PyramidDescriptor:
    slide_id: str
    width: int
    height: int
    levels: tuple  # of LevelInfo, base first, dims strictly decreasing
    tile_size: int
    overlap: int
    base_magnification: float | None = None
    mpp: float | None = None

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def level_dims(self, level: int) -> tuple[int, int]:
        if not 0 <= level < len(self.levels):
            raise LevelOutOfRange(f"level {level} of {len(self.levels)}")
        info = self.levels[level]
        return info.width, info.height


class SlideReader:
    """Common stitching logic over per-backend stored tiles."""

    descriptor: PyramidDescriptor
    channels: int

    def __init__(self):
        self._cache: OrderedDict = OrderedDict()
        self._cache_lock = threading.Lock()

    # backends implement: _load_tile(level, col, row) -> PixelBuffer
    def _load_tile(self, level: int, col: int, row: int) -> PixelBuffer:
        raise NotImplementedError

    def _tile_grid(self, level: int) -> tuple[int, int]:
        lw, lh = self.descriptor.level_dims(level)
        ts = self.descriptor.tile_size
        return -(-lw // ts), -(-lh // ts)

    def read_tile_raw(self, level: int, col: int, row: int) -> PixelBuffer:
        """Decoded stored tile, exactly the stored dims (edges may be padded)."""
        cols, rows = self._tile_grid(level)
        if not (0 <= col < cols and 0 <= row < rows):
            raise TileOutOfRange(f"tile ({col},{row}) outside grid {cols}x{rows}")
        key = (level, col, row)
        with self._cache_lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        buf = self._load_tile(level, col, row)
        with self._cache_lock:
            self._cache[key] = buf
            if len(self._cache) > _TILE_CACHE_SIZE:
                self._cache.popitem(last=False)
        return buf

    def read_region(self, level: int, x: int, y: int, w: int, h: int) -> PixelBuffer:
        """Stitch the covering tiles into the requested rect.

        Portions outside the level bounds come back white (255).
        """
        lw, lh = self.descriptor.level_dims(level)
        if w <= 0 or h <= 0:
            raise ZeroAreaRect(f"requested {w}x{h} region")
        out = np.full((h, w, self.channels), 255, dtype=np.uint8)
        ix0, iy0 = max(x, 0), max(y, 0)
        ix1, iy1 = min(x + w, lw), min(y + h, lh)
        if ix0 < ix1 and iy0 < iy1:
            ts = self.descriptor.tile_size
            for row in range(iy0 // ts, (iy1 - 1) // ts + 1):
                for col in range(ix0 // ts, (ix1 - 1) // ts + 1):
                    tile = self.read_tile_raw(level, col, row).to_array()
                    tx, ty = col * ts, row * ts
                    sx0, sy0 = max(ix0 - tx, 0), max(iy0 - ty, 0)
                    sx1 = min(ix1 - tx, tile.shape[1])
                    sy1 = min(iy1 - ty, tile.shape[0])
                    out[
                        ty + sy0 - y : ty + sy1 - y,
                        tx + sx0 - x : tx + sx1 - x,
                    ] = tile[sy0:sy1, sx0:sx1]
        return buffer_from_array(out)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _parse_description_metadata(description: str) -> tuple[float | None, float | None]:
    mag = _APPMAG_RE.search(description)
    mpp = _MPP_RE.search(description)
    return (
        float(mag.group(1)) if mag else None,
        float(mpp.group(1)) if mpp else None,
    )


class TiffSlideReader(SlideReader):
    """Random-access reads over a tiled TIFF/SVS file (memory-mapped)."""

    def __init__(self, path, slide_id: str | None = None,
                 base_magnification: float | None = None, mpp: float | None = None):
        super().__init__()
        self.path = Path(path)
        try:
            self._fh = open(self.path, "rb")
        except OSError as exc:
            raise UnreadableSource(f"cannot open {self.path}: {exc}") from exc
        try:
            self._data = mmap.mmap(self._fh.fileno(), 0, access=mmap.ACCESS_READ)
        except (OSError, ValueError) as exc:  # empty file cannot be mapped
            self._fh.close()
            raise TruncatedFile(f"cannot map {self.path}: {exc}") from exc
        header = tiff.parse_header(self._data)
        chain = tiff.walk_ifd_chain(self._data, header.first_ifd_offset)
        tiled = [tiff.validate_tiled_directory(d) for d in chain if d.is_tiled]
        if not tiled:
            raise UnsupportedFormat("no tiled image directories (strip TIFF?)")
        tiled.sort(key=lambda im: (-im.width, -im.height))
        self._images = tiled
        base = tiled[0]
        self.channels = base.channels
        if any(im.channels != base.channels for im in tiled):
            raise UnsupportedFormat("pyramid levels disagree on channel count")
        if any(
            (im.tile_width, im.tile_height) != (base.tile_width, base.tile_height)
            for im in tiled
        ):
            raise UnsupportedFormat("pyramid levels disagree on tile size")

        desc_mag, desc_mpp = _parse_description_metadata(base.description)
        levels = tuple(
            LevelInfo(im.width, im.height, base.width / im.width) for im in tiled
        )
        self.descriptor = PyramidDescriptor(
            slide_id=slide_id or self.path.stem,
            width=base.width,
            height=base.height,
            levels=levels,
            tile_size=base.tile_width,
            overlap=0,
            base_magnification=base_magnification or desc_mag,
            mpp=mpp or desc_mpp,
        )

    def _load_tile(self, level: int, col: int, row: int) -> PixelBuffer:
        return tiff.decode_tile(self._images[level], self._data, col, row)

    def _tile_grid(self, level: int) -> tuple[int, int]:
        self.descriptor.level_dims(level)  # range check
        im = self._images[level]
        return im.tiles_across, im.tiles_down

    def close(self) -> None:
        self._data.close()
        self._fh.close()


def write_manifest(path: Path, descriptor: PyramidDescriptor, fmt: str) -> None:
    doc = {
        "width": descriptor.width,
        "height": descriptor.height,
        "tile_size": descriptor.tile_size,
        "overlap": descriptor.overlap,
        "format": fmt,
        "levels": [[lv.width, lv.height, lv.downsample] for lv in descriptor.levels],
        "base_magnification": descriptor.base_magnification,
        "mpp": descriptor.mpp,
    }
    (Path(path) / MANIFEST_NAME).write_text(json.dumps(doc, indent=1))


def read_manifest(path) -> dict:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingManifest(f"no manifest in {path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except (ValueError, OSError) as exc:
        raise ManifestMismatch(f"manifest unreadable: {exc}") from exc
    for key in ("width", "height", "tile_size", "overlap", "format", "levels"):
        if key not in doc:
            raise ManifestMismatch(f"manifest missing field {key!r}")
    return doc


class PyramidDirReader(SlideReader):
    """Reads the internal directory pyramid (exact-size png/jpg tiles)."""

    def __init__(self, path, slide_id: str | None = None):
        super().__init__()
        self.path = Path(path)
        doc = read_manifest(self.path)
        self.fmt = doc["format"]
        levels = tuple(LevelInfo(int(w), int(h), float(d)) for w, h, d in doc["levels"])
        self.descriptor = PyramidDescriptor(
            slide_id=slide_id or self.path.name,
            width=int(doc["width"]),
            height=int(doc["height"]),
            levels=levels,
            tile_size=int(doc["tile_size"]),
            overlap=int(doc["overlap"]),
            base_magnification=doc.get("base_magnification"),
            mpp=doc.get("mpp"),
        )
        self._validate_layout()
        probe = self.read_tile_raw(0, 0, 0)
        self.channels = probe.channels

    def _validate_layout(self) -> None:
        d = self.descriptor
        if not d.levels or d.levels[0][:2] != (d.width, d.height):
            raise ManifestMismatch("base level dims disagree with declared size")
        ts = d.tile_size
        for k, (lw, lh, _) in enumerate(d.levels):
            level_dir = self.path / "levels" / str(k)
            if not level_dir.is_dir():
                raise ManifestMismatch(f"level directory {k} missing")
            expected = (-(-lw // ts)) * (-(-lh // ts))
            actual = sum(1 for _ in level_dir.glob(f"*.{self.fmt}"))
            if actual != expected:
                raise ManifestMismatch(
                    f"level {k} has {actual} tiles, grid expects {expected}"
                )

    def _load_tile(self, level: int, col: int, row: int) -> PixelBuffer:
        tile_path = self.path / "levels" / str(level) / f"{col}_{row}.{self.fmt}"
        if not tile_path.is_file():
            raise ManifestMismatch(f"tile file missing: {tile_path}")
        return decode_image(tile_path.read_bytes())


def open_pyramid_dir(path) -> PyramidDescriptor:
    """Validate an internal pyramid directory and return its descriptor."""
    return PyramidDirReader(path).descriptor


def open_slide(path, slide_id: str | None = None, **metadata) -> SlideReader:
    """Open either backend: a directory with a manifest, or a TIFF file."""
    p = Path(path)
    if p.is_dir():
        return PyramidDirReader(p, slide_id=slide_id)
    if not p.is_file():
        raise UnreadableSource(f"no such slide source: {p}")
    return TiffSlideReader(p, slide_id=slide_id, **metadata)
