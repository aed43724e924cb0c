"""8-bit images and binary PPM/PGM file IO.

PPM (P6) carries RGB slides and patches, PGM (P5) carries masks; both are
bit-exact interchange formats with trivial headers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class RgbImage:
    """Row-major 8-bit RGB image; pixels has shape (height, width, 3)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel array shape {self.pixels.shape} does not match "
                             f"{self.height}x{self.width}x3")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "RgbImage":
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got shape {pixels.shape}")
        return cls(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)


def to_unit_chw(image: RgbImage) -> np.ndarray:
    """Image as float64 (3, H, W) scaled to [0, 1] — the model input layout."""
    return image.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0


def _read_header(data: bytes, magic: bytes, path: Path) -> tuple[list[int], int]:
    """Parse a PNM header, returning ([width, height, maxval], data offset)."""
    if not data.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} file, got {data[:2]!r}")
    fields: list[int] = []
    i = len(magic)
    while len(fields) < 3:
        if i >= len(data):
            raise ValueError(f"{path}: truncated header")
        ch = data[i:i + 1]
        if ch == b"#":
            i = data.index(b"\n", i) + 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            fields.append(int(data[i:j]))
            i = j
    return fields, i + 1  # single whitespace byte after maxval


def write_ppm(path: str | Path, image: RgbImage) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.pixels.tobytes())


def read_ppm(path: str | Path) -> RgbImage:
    path = Path(path)
    data = path.read_bytes()
    (width, height, maxval), offset = _read_header(data, b"P6", path)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    raw = data[offset:offset + width * height * 3]
    if len(raw) != width * height * 3:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return RgbImage(width=width, height=height, pixels=pixels.copy())


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"expected 2D gray array, got shape {gray.shape}")
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    (width, height, maxval), offset = _read_header(data, b"P5", path)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    raw = data[offset:offset + width * height]
    if len(raw) != width * height:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy()


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Binary mask (0/1) stored as 0/255 PGM for viewability."""
    write_pgm(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def read_mask(path: str | Path) -> np.ndarray:
    return (read_pgm(path) > 0).astype(np.uint8)
