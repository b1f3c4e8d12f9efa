"""RGB rasters and binary PPM/PGM I/O."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    InvalidArgumentError,
    MalformedHeaderError,
    MissingImageError,
    TruncatedPayloadError,
)
from .geometry import BBox


@dataclass(frozen=True, eq=False)
class Raster:
    """An 8-bit RGB image stored as a ``(height, width, 3)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] != 3:
            raise InvalidArgumentError(f"expected (h, w, 3) uint8 pixels, got {p.dtype} {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidArgumentError("raster must be at least 1x1")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)

    def full_box(self) -> BBox:
        return BBox(0.0, 0.0, float(self.width), float(self.height))

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.all(self.pixels == other.pixels))

    __hash__ = None


def mirror_horizontal(r: Raster) -> Raster:
    return Raster(np.ascontiguousarray(r.pixels[:, ::-1, :]))


def integer_box(box: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Smallest pixel-aligned window covering ``box``, clipped to the image."""
    x0 = max(0, int(np.floor(box.x_min)))
    y0 = max(0, int(np.floor(box.y_min)))
    x1 = min(width, int(np.ceil(box.x_max)))
    y1 = min(height, int(np.ceil(box.y_max)))
    if x0 >= x1 or y0 >= y1:
        raise InvalidArgumentError(f"box {box.as_tuple()} does not overlap a {width}x{height} image")
    return x0, y0, x1, y1


def crop(r: Raster, box: BBox) -> tuple[Raster, BBox]:
    """Crop to the pixel window covering ``box``; also returns that window."""
    x0, y0, x1, y1 = integer_box(box, r.width, r.height)
    return Raster(np.ascontiguousarray(r.pixels[y0:y1, x0:x1])), BBox(x0, y0, x1, y1)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_header(data: bytes, magic: bytes) -> tuple[int, int, int]:
    if not data.startswith(magic):
        raise MalformedHeaderError(f"expected magic {magic!r}, got {data[:2]!r}")
    pos = 2
    values = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise MalformedHeaderError("header ended early")
        tok = m.group(1)
        if not tok.isdigit():
            raise MalformedHeaderError(f"non-numeric header field {tok!r}")
        values.append(int(tok))
        pos = m.end()
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise MalformedHeaderError("missing whitespace after maxval")
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise MalformedHeaderError(f"only maxval 255 is supported, got {maxval}")
    return width, height, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(str(path))
    data = path.read_bytes()
    width, height, offset = _read_header(data, magic)
    n = width * height * channels
    payload = data[offset : offset + n]
    if len(payload) < n:
        raise TruncatedPayloadError(f"{path}: expected {n} bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).copy()


def load_image(path) -> Raster:
    """Decode a binary P6 file with maxval 255."""
    return Raster(_read_netpbm(path, b"P6", 3))


def encode_ppm(r: Raster) -> bytes:
    return b"P6\n%d %d\n255\n" % (r.width, r.height) + r.pixels.tobytes()


def _atomic_write(path, payload: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_image(r: Raster, path):
    _atomic_write(path, encode_ppm(r))


def load_mask(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def save_mask(mask: np.ndarray, path):
    """Write a 2-D array as a binary PGM; booleans are mapped to {0, 255}."""
    m = np.asarray(mask)
    if m.dtype == bool:
        m = m.astype(np.uint8) * 255
    m = np.clip(m, 0, 255).astype(np.uint8)
    h, w = m.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + m.tobytes())
