"""Pyramidal tiled-TIFF parsing (classic + BigTIFF subset).

Stdlib ``struct`` over an in-memory byte view. Every offset and length is
bounds-checked against the buffer so that arbitrary byte mutations of a
valid file surface as structured errors, never out-of-bounds reads or
unbounded loops.

Supported subset: 8-bit gray or RGB, tiled organization, compression 1
(none) or 7 (JPEG baseline via the codec registry). Strip-organized
directories are skipped as auxiliary images.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..errors import (
    BadMagic,
    CyclicChain,
    InvalidDirectory,
    TileOutOfRange,
    TruncatedFile,
    UnsupportedCompression,
    UnsupportedFormat,
    UnsupportedTagType,
    UnsupportedVersion,
)
from ..pixels import PixelBuffer, decode_image

# Tag ids used by the subset
TAG_IMAGE_WIDTH = 256
TAG_IMAGE_LENGTH = 257
TAG_BITS_PER_SAMPLE = 258
TAG_COMPRESSION = 259
TAG_PHOTOMETRIC = 262
TAG_IMAGE_DESCRIPTION = 270
TAG_SAMPLES_PER_PIXEL = 277
TAG_TILE_WIDTH = 322
TAG_TILE_LENGTH = 323
TAG_TILE_OFFSETS = 324
TAG_TILE_BYTE_COUNTS = 325
TAG_JPEG_TABLES = 347

REQUIRED_TILE_TAGS = (
    TAG_IMAGE_WIDTH,
    TAG_IMAGE_LENGTH,
    TAG_BITS_PER_SAMPLE,
    TAG_COMPRESSION,
    TAG_TILE_WIDTH,
    TAG_TILE_LENGTH,
    TAG_TILE_OFFSETS,
    TAG_TILE_BYTE_COUNTS,
)

# TIFF field types: type id -> (element size, struct char). ASCII and
# RATIONAL are handled specially.
TYPE_BYTE = 1
TYPE_ASCII = 2
TYPE_SHORT = 3
TYPE_LONG = 4
TYPE_RATIONAL = 5
TYPE_LONG8 = 16

_TYPE_SIZES = {
    TYPE_BYTE: (1, "B"),
    TYPE_ASCII: (1, None),
    TYPE_SHORT: (2, "H"),
    TYPE_LONG: (4, "I"),
    TYPE_RATIONAL: (8, None),
    TYPE_LONG8: (8, "Q"),
}

COMPRESSION_NONE = 1
COMPRESSION_JPEG = 7
# Aperio JPEG2000 variants plus the generic JP2K code: recognized so the
# error names the actual cause instead of a generic failure.
JPEG2000_CODES = {33003, 33005, 34712}


@dataclass(frozen=True)
class TiffHeader:
    byte_order: str  # "little" | "big"
    is_big_tiff: bool
    first_ifd_offset: int

    @property
    def endian(self) -> str:
        return "<" if self.byte_order == "little" else ">"


@dataclass
class TiffDirectory:
    """One IFD: raw tag values plus its own and its successor's offset."""

    offset: int
    next_offset: int
    tag_map: dict = field(default_factory=dict)

    def values(self, tag: int):
        return self.tag_map.get(tag)

    def first(self, tag: int, default=None):
        v = self.tag_map.get(tag)
        if v is None:
            return default
        if isinstance(v, str):
            return v
        return v[0] if len(v) else default

    @property
    def is_tiled(self) -> bool:
        return TAG_TILE_OFFSETS in self.tag_map or TAG_TILE_WIDTH in self.tag_map


def _need(data, offset: int, n: int) -> None:
    if offset < 0 or n < 0 or offset + n > len(data):
        raise TruncatedFile(f"need {n} bytes at offset {offset}, file has {len(data)}")


def parse_header(data) -> TiffHeader:
    """Parse the TIFF/BigTIFF header from the start of ``data``."""
    _need(data, 0, 8)
    order = bytes(data[0:2])
    if order == b"II":
        endian, byte_order = "<", "little"
    elif order == b"MM":
        endian, byte_order = ">", "big"
    else:
        raise BadMagic(f"not a TIFF file (byte-order mark {order!r})")
    (version,) = struct.unpack(endian + "H", data[2:4])
    if version == 42:
        (first,) = struct.unpack(endian + "I", data[4:8])
        return TiffHeader(byte_order, False, first)
    if version == 43:
        _need(data, 0, 16)
        offsize, reserved = struct.unpack(endian + "HH", data[4:8])
        if offsize != 8 or reserved != 0:
            raise UnsupportedVersion(
                f"BigTIFF with offset size {offsize}, reserved {reserved}"
            )
        (first,) = struct.unpack(endian + "Q", data[8:16])
        return TiffHeader(byte_order, True, first)
    raise UnsupportedVersion(f"TIFF version word {version}")


def _read_tag_values(data, header: TiffHeader, dtype: int, count: int, raw: bytes):
    """Decode one entry's value list, chasing the offset when not inline."""
    endian = header.endian
    if dtype not in _TYPE_SIZES:
        raise UnsupportedTagType(f"TIFF field type {dtype}")
    elem_size, fmt = _TYPE_SIZES[dtype]
    total = elem_size * count
    inline_cap = 8 if header.is_big_tiff else 4
    if total <= inline_cap:
        payload = raw[:total]
    else:
        off_fmt = "Q" if header.is_big_tiff else "I"
        (value_offset,) = struct.unpack(endian + off_fmt, raw)
        _need(data, value_offset, total)
        payload = bytes(data[value_offset : value_offset + total])
    if dtype == TYPE_ASCII:
        return bytes(payload).decode("latin-1").rstrip("\x00")
    if dtype == TYPE_RATIONAL:
        parts = struct.unpack(endian + "II" * count, payload)
        return tuple(
            parts[2 * i] / parts[2 * i + 1] if parts[2 * i + 1] else 0.0
            for i in range(count)
        )
    return struct.unpack(f"{endian}{count}{fmt}", payload)


def _parse_ifd(data, header: TiffHeader, offset: int) -> TiffDirectory:
    endian = header.endian
    if header.is_big_tiff:
        _need(data, offset, 8)
        (count,) = struct.unpack(endian + "Q", data[offset : offset + 8])
        entry_size, entries_at = 20, offset + 8
    else:
        _need(data, offset, 2)
        (count,) = struct.unpack(endian + "H", data[offset : offset + 2])
        entry_size, entries_at = 12, offset + 2
    body = count * entry_size
    next_size = 8 if header.is_big_tiff else 4
    _need(data, entries_at, body + next_size)

    directory = TiffDirectory(offset=offset, next_offset=0)
    for i in range(count):
        at = entries_at + i * entry_size
        raw = bytes(data[at : at + entry_size])
        tag, dtype = struct.unpack(endian + "HH", raw[0:4])
        if header.is_big_tiff:
            (n,) = struct.unpack(endian + "Q", raw[4:12])
            value_raw = raw[12:20]
        else:
            (n,) = struct.unpack(endian + "I", raw[4:8])
            value_raw = raw[8:12]
        directory.tag_map[tag] = _read_tag_values(data, header, dtype, n, value_raw)

    next_fmt = "Q" if header.is_big_tiff else "I"
    (directory.next_offset,) = struct.unpack(
        endian + next_fmt, data[entries_at + body : entries_at + body + next_size]
    )
    return directory


def walk_ifd_chain(data, first_offset: int) -> list[TiffDirectory]:
    """Follow the IFD chain from ``first_offset`` until next_offset == 0."""
    header = parse_header(data)
    directories: list[TiffDirectory] = []
    visited: set[int] = set()
    offset = first_offset
    while offset != 0:
        if offset in visited:
            raise CyclicChain(f"IFD chain revisits offset {offset}")
        visited.add(offset)
        directory = _parse_ifd(data, header, offset)
        directories.append(directory)
        offset = directory.next_offset
    if not directories:
        raise InvalidDirectory("file contains no image directories")
    return directories


@dataclass(frozen=True)
class TiledImage:
    """A validated tiled directory ready for tile reads."""

    width: int
    height: int
    tile_width: int
    tile_height: int
    channels: int
    compression: int
    tile_offsets: tuple
    tile_byte_counts: tuple
    jpeg_tables: bytes | None
    description: str

    @property
    def tiles_across(self) -> int:
        return -(-self.width // self.tile_width)

    @property
    def tiles_down(self) -> int:
        return -(-self.height // self.tile_height)


def _int_first(directory: TiffDirectory, tag: int, default=None) -> int:
    # A mutated file can carry any tag with any declared type (ASCII width,
    # rational tile size); coerce defensively so malformed values surface
    # as InvalidDirectory rather than a bare ValueError.
    value = directory.first(tag, default)
    if value is None:
        raise InvalidDirectory(f"tag {tag} has no value")
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise InvalidDirectory(f"tag {tag} holds a non-numeric value") from exc


def _int_values(directory: TiffDirectory, tag: int) -> tuple:
    values = directory.values(tag)
    if values is None:
        raise InvalidDirectory(f"tag {tag} has no value")
    try:
        return tuple(int(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise InvalidDirectory(f"tag {tag} holds non-numeric values") from exc


def validate_tiled_directory(directory: TiffDirectory) -> TiledImage:
    """Check the tiled-directory invariants and distill the needed fields."""
    for tag in REQUIRED_TILE_TAGS:
        if tag not in directory.tag_map:
            raise InvalidDirectory(f"tiled directory missing required tag {tag}")
    width = _int_first(directory, TAG_IMAGE_WIDTH)
    height = _int_first(directory, TAG_IMAGE_LENGTH)
    tile_w = _int_first(directory, TAG_TILE_WIDTH)
    tile_h = _int_first(directory, TAG_TILE_LENGTH)
    if width <= 0 or height <= 0:
        raise InvalidDirectory(f"image dims {width}x{height}")
    if tile_w <= 0 or tile_w % 16 or tile_h <= 0 or tile_h % 16:
        raise InvalidDirectory(f"tile dims {tile_w}x{tile_h} not positive multiples of 16")

    bits = _int_values(directory, TAG_BITS_PER_SAMPLE)
    samples = _int_first(directory, TAG_SAMPLES_PER_PIXEL, 1)
    if samples not in (1, 3):
        raise UnsupportedFormat(f"{samples} samples per pixel")
    if any(b != 8 for b in bits):
        raise UnsupportedFormat(f"bits per sample {bits}")
    photometric = _int_first(directory, TAG_PHOTOMETRIC, 1 if samples == 1 else 2)
    if photometric not in (1, 2):
        raise UnsupportedFormat(f"photometric interpretation {photometric}")

    offsets = _int_values(directory, TAG_TILE_OFFSETS)
    counts = _int_values(directory, TAG_TILE_BYTE_COUNTS)
    grid = (-(-width // tile_w)) * (-(-height // tile_h))
    if len(offsets) != len(counts) or len(offsets) != grid:
        raise InvalidDirectory(
            f"tile table sizes {len(offsets)}/{len(counts)} != grid {grid}"
        )
    if any(o < 0 for o in offsets) or any(c < 0 for c in counts):
        raise InvalidDirectory("negative tile offset or byte count")

    tables = directory.values(TAG_JPEG_TABLES)
    jpeg_tables = None
    if tables:
        try:
            jpeg_tables = bytes(int(b) & 0xFF for b in tables)
        except (TypeError, ValueError) as exc:
            raise InvalidDirectory("JPEG tables tag holds non-byte values") from exc
    return TiledImage(
        width=width,
        height=height,
        tile_width=tile_w,
        tile_height=tile_h,
        channels=samples,
        compression=_int_first(directory, TAG_COMPRESSION),
        tile_offsets=offsets,
        tile_byte_counts=counts,
        jpeg_tables=jpeg_tables,
        description=str(directory.first(TAG_IMAGE_DESCRIPTION, "")),
    )


def _splice_jpeg_tables(tables: bytes, tile: bytes) -> bytes:
    # Abbreviated JPEG streams: tables end with EOI, tile starts with SOI;
    # merged stream is SOI + table segments + tile payload.
    if len(tables) < 4 or len(tile) < 2:
        raise InvalidDirectory("JPEG tables or tile stream too short")
    return tile[:2] + tables[2:-2] + tile[2:]


def decode_tile(image: TiledImage, data, col: int, row: int) -> PixelBuffer:
    """Decode one stored tile (padded edge tiles are returned as stored)."""
    if not (0 <= col < image.tiles_across and 0 <= row < image.tiles_down):
        raise TileOutOfRange(
            f"tile ({col},{row}) outside grid "
            f"{image.tiles_across}x{image.tiles_down}"
        )
    index = row * image.tiles_across + col
    offset = image.tile_offsets[index]
    nbytes = image.tile_byte_counts[index]
    _need(data, offset, nbytes)
    raw = bytes(data[offset : offset + nbytes])

    if image.compression == COMPRESSION_NONE:
        expected = image.tile_width * image.tile_height * image.channels
        if len(raw) != expected:
            raise InvalidDirectory(
                f"uncompressed tile has {len(raw)} bytes, expected {expected}"
            )
        return PixelBuffer(image.tile_width, image.tile_height, image.channels, raw)

    if image.compression == COMPRESSION_JPEG:
        stream = _splice_jpeg_tables(image.jpeg_tables, raw) if image.jpeg_tables else raw
        try:
            buf = decode_image(stream)
        except Exception as exc:
            raise InvalidDirectory(f"JPEG tile failed to decode: {exc}") from exc
        if (buf.width, buf.height) != (image.tile_width, image.tile_height):
            raise InvalidDirectory(
                f"JPEG tile decoded to {buf.width}x{buf.height}, "
                f"expected {image.tile_width}x{image.tile_height}"
            )
        if buf.channels != image.channels:
            arr = buf.to_array()
            if image.channels == 3:
                arr = arr.repeat(3, axis=2)
            else:
                arr = arr[:, :, :1]
            from ..pixels import buffer_from_array

            return buffer_from_array(arr)
        return buf

    if image.compression in JPEG2000_CODES:
        raise UnsupportedCompression(
            f"JPEG2000 compression (code {image.compression}) is not supported"
        )
    raise UnsupportedCompression(f"compression code {image.compression}")
