"""
Binary-to-image conversion.

Each byte of a file becomes one grayscale pixel. The raster width is picked
from the file size (see ``WIDTH_TABLE``) unless overridden, rows are filled
in file order and the last row is zero-padded. ``image_to_input`` then turns
a raster into the fixed-size, [0, 1]-scaled array a network consumes.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

KB = 1024

# (upper bound in bytes, exclusive) -> width. Last entry catches everything.
WIDTH_TABLE = (
    (10 * KB, 32),
    (30 * KB, 64),
    (60 * KB, 128),
    (100 * KB, 256),
    (200 * KB, 384),
    (500 * KB, 512),
    (1000 * KB, 768),
    (None, 1024),
)

MIN_INPUT_SIDE = 8


@dataclass(frozen=True)
class RawBinary:
    data: bytes
    source_id: str = ""

    @property
    def size_bytes(self) -> int:
        return len(self.data)

    @classmethod
    def from_path(cls, path: Union[str, os.PathLike]) -> "RawBinary":
        return cls(Path(path).read_bytes(), str(path))


@dataclass(frozen=True, eq=False)
class GrayscaleImage:
    """Row-major 8-bit luminance raster, stored as a (height, width) uint8 array."""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2-D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, GrayscaleImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True, eq=False)
class NetworkInput:
    """Channel-major float32 array of shape (channels, side, side), values in [0, 1]."""

    values: np.ndarray = field(repr=False)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def side(self) -> int:
        return self.values.shape[1]


def width_for_size(size_bytes: int) -> int:
    for upper, width in WIDTH_TABLE:
        if upper is None or size_bytes < upper:
            return width
    raise AssertionError("unreachable")


def bytes_to_image(binary: RawBinary, width_override: Optional[int] = None) -> GrayscaleImage:
    n = binary.size_bytes
    if n == 0:
        raise ValueError("empty binary")
    if width_override is not None:
        if width_override <= 0:
            raise ValueError("invalid width")
        width = int(width_override)
    else:
        width = width_for_size(n)
    height = math.ceil(n / width)
    buf = np.zeros(width * height, dtype=np.uint8)
    buf[:n] = np.frombuffer(binary.data, dtype=np.uint8)
    return GrayscaleImage(buf.reshape(height, width), binary.source_id)


def _axis_weights(n_src: int, n_dst: int):
    # corner-aligned: dst 0 -> src 0, dst n_dst-1 -> src n_src-1
    if n_src == 1:
        zeros = np.zeros(n_dst, dtype=np.intp)
        return zeros, zeros, np.zeros(n_dst)
    pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n_src - 2)
    return lo, lo + 1, pos - lo


def resize_bilinear(pixels: np.ndarray, side: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D array to (side, side), float64."""
    src = np.asarray(pixels, dtype=np.float64)
    r0, r1, fr = _axis_weights(src.shape[0], side)
    c0, c1, fc = _axis_weights(src.shape[1], side)
    # lerp form a + (b - a) * t keeps constant regions exact
    rows_lo, rows_hi = src[r0], src[r1]
    top = rows_lo[:, c0] + (rows_lo[:, c1] - rows_lo[:, c0]) * fc
    bottom = rows_hi[:, c0] + (rows_hi[:, c1] - rows_hi[:, c0]) * fc
    return top + (bottom - top) * fr[:, None]


def image_to_input(img: GrayscaleImage, side: int = 224, channels: int = 3) -> NetworkInput:
    if side < MIN_INPUT_SIDE:
        raise ValueError("input too small")
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    plane = (resize_bilinear(img.pixels, side) / 255.0).astype(np.float32)
    np.clip(plane, 0.0, 1.0, out=plane)
    return NetworkInput(np.repeat(plane[None], channels, axis=0))


def write_image_png(img: GrayscaleImage, path: Union[str, os.PathLike]) -> None:
    # Pillow emits IHDR/IDAT/IEND only for mode "L"; no tIME chunk, no interlace.
    Image.fromarray(img.pixels).save(path, format="PNG", optimize=False)


def read_image_png(path: Union[str, os.PathLike]) -> GrayscaleImage:
    path = Path(path)
    try:
        opened = Image.open(path)
    except UnidentifiedImageError as exc:
        raise ValueError(f"unsupported image format: {path}") from exc
    with opened as im:
        if im.format != "PNG" or im.mode != "L":
            raise ValueError(f"unsupported image format: {path} ({im.format}, mode {im.mode})")
        pixels = np.array(im, dtype=np.uint8)
    return GrayscaleImage(pixels, str(path))


def convert_file(src: Union[str, os.PathLike], dst: Union[str, os.PathLike],
                 width_override: Optional[int] = None) -> GrayscaleImage:
    img = bytes_to_image(RawBinary.from_path(src), width_override)
    write_image_png(img, dst)
    return img
