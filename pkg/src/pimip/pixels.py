"""Raw pixel buffers and image encoding helpers.

A :class:`PixelBuffer` is the interchange unit between the readers, the
tiler and the analyzers: row-major 8-bit pixels, 1 (gray) or 3 (RGB)
channels, no padding.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import UnsupportedFormat

ENCODE_FORMATS = {"png", "jpg", "jpeg"}


@dataclass(frozen=True)
class PixelBuffer:
    width: int
    height: int
    channels: int  # 1 = gray, 3 = RGB
    data: bytes

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise UnsupportedFormat(f"channels must be 1 or 3, got {self.channels}")
        expected = self.width * self.height * self.channels
        if len(self.data) != expected:
            raise ValueError(
                f"buffer size {len(self.data)} != {self.width}x{self.height}x{self.channels}"
            )

    def to_array(self) -> np.ndarray:
        """View as (height, width, channels) uint8 array."""
        a = np.frombuffer(self.data, dtype=np.uint8)
        return a.reshape(self.height, self.width, self.channels)


def buffer_from_array(a: np.ndarray) -> PixelBuffer:
    """Build a PixelBuffer from a (h, w) or (h, w, c) uint8 array."""
    a = np.asarray(a, dtype=np.uint8)
    if a.ndim == 2:
        a = a[:, :, None]
    h, w, c = a.shape
    return PixelBuffer(width=w, height=h, channels=c, data=a.tobytes())


def encode_image(buf: PixelBuffer, fmt: str, quality: int = 90) -> bytes:
    """Encode a buffer as png or jpg. PNG output is byte-stable across runs."""
    fmt = fmt.lower()
    if fmt not in ENCODE_FORMATS:
        raise UnsupportedFormat(f"unsupported tile format {fmt!r}")
    arr = buf.to_array()
    mode = "L" if buf.channels == 1 else "RGB"
    img = Image.fromarray(arr[:, :, 0] if buf.channels == 1 else arr, mode=mode)
    out = io.BytesIO()
    if fmt == "png":
        img.save(out, format="PNG", compress_level=1)
    else:
        img.save(out, format="JPEG", quality=quality)
    return out.getvalue()


def decode_image(data: bytes) -> PixelBuffer:
    """Decode png/jpg bytes into a gray or RGB buffer."""
    img = Image.open(io.BytesIO(data))
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if img.mode not in ("1", "I;16", "I") else "L")
    a = np.asarray(img, dtype=np.uint8)
    return buffer_from_array(a)
