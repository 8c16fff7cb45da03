"""Image buffers and the two on-disk formats.

PFM stores linear float32 values (little-endian, scale -1.0, bottom row
first) and is the format every metric reads. PNG is 8-bit, gamma 2.2 encoded
and clamped to [0, 1]; it exists for looking at results.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

GAMMA = 2.2


@dataclass
class ImageBuffer:
    """Row-major H x W x C linear-light image (C is 1 or 3)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3) or data.shape[0] < 1 or data.shape[1] < 1:
            raise InvalidInputError(f"image must be HxWx1 or HxWx3, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("image contains non-finite values")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def filled(cls, height: int, width: int, value) -> "ImageBuffer":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.broadcast_to(value, (height, width, len(value))).copy())


def write_pfm(path, image: ImageBuffer) -> None:
    tag = b"PF" if image.channels == 3 else b"Pf"
    header = tag + b"\n%d %d\n-1.0\n" % (image.width, image.height)
    body = np.ascontiguousarray(image.data[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header + body)


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf) and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pfm(path) -> ImageBuffer:
    with open(path, "rb") as f:
        buf = f.read()
    tag, pos = _read_token(buf, 0)
    if tag not in (b"PF", b"Pf"):
        raise InvalidInputError(f"{path}: not a PFM file (tag {tag!r})")
    channels = 3 if tag == b"PF" else 1
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    scale, pos = _read_token(buf, pos)
    pos += 1  # single whitespace byte after the scale
    width, height, scale = int(w), int(h), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    if len(buf) - pos < 4 * count:
        raise InvalidInputError(f"{path}: truncated PFM payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(height, width, channels)
    return ImageBuffer(data[::-1].astype(np.float64))


def encode_srgb8(data: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * np.clip(data, 0.0, 1.0) ** (1.0 / GAMMA)).astype(np.uint8)


def write_png(path, image: ImageBuffer) -> None:
    from PIL import Image

    pixels = encode_srgb8(image.data)
    Image.fromarray(pixels[:, :, 0] if image.channels == 1 else pixels).save(path)


def read_png(path) -> ImageBuffer:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return ImageBuffer((arr.astype(np.float64) / 255.0) ** GAMMA)


_WRITERS = {".pfm": write_pfm, ".png": write_png}
_READERS = {".pfm": read_pfm, ".png": read_png}


def write_image(path, image: ImageBuffer) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _WRITERS:
        raise InvalidInputError(f"unsupported image format {ext!r}")
    _WRITERS[ext](path, image)


def read_image(path) -> ImageBuffer:
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _READERS:
        raise InvalidInputError(f"unsupported image format {ext!r}")
    return _READERS[ext](path)
