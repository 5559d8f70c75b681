"""Slide input: TIFF parsing and uniform pyramid region reads."""

from .pyramid import (
    LevelInfo,
    PyramidDescriptor,
    PyramidDirReader,
    SlideReader,
    TiffSlideReader,
    open_pyramid_dir,
    open_slide,
    read_manifest,
    write_manifest,
)
from .tiff import (
    TiffDirectory,
    TiffHeader,
    TiledImage,
    decode_tile,
    parse_header,
    validate_tiled_directory,
    walk_ifd_chain,
)

__all__ = [
    "LevelInfo",
    "PyramidDescriptor",
    "PyramidDirReader",
    "SlideReader",
    "TiffSlideReader",
    "TiffDirectory",
    "TiffHeader",
    "TiledImage",
    "decode_tile",
    "open_pyramid_dir",
    "open_slide",
    "parse_header",
    "read_manifest",
    "validate_tiled_directory",
    "walk_ifd_chain",
    "write_manifest",
]
