"""Slide tiling, mask stitching, and synthetic labeled-slide generation.

Slides are cut into a non-overlapping grid of square patches; partial
border strips are dropped. The synthetic generator stands in for clinical
data: dark-violet follicle clusters (mask foreground), pale colloid blobs,
and near-white background, with per-patch labels derived from coverage
thresholds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .images import RgbImage


class PatchLabel(Enum):
    FOLLICULAR = "follicular"
    COLLOID = "colloid"
    NONINFO = "noninfo"


@dataclass(frozen=True)
class PatchCoord:
    """Grid cell: (row, col) indices and (x, y) top-left pixel offsets."""

    row: int
    col: int
    x: int
    y: int
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"patch size must be >= 1, got {self.size}")
        if self.x != self.col * self.size or self.y != self.row * self.size:
            raise ValueError(f"offsets ({self.x},{self.y}) break the grid invariant "
                             f"for (row={self.row}, col={self.col}, size={self.size})")


@dataclass
class LabeledSlide:
    image: RgbImage
    mask: np.ndarray  # uint8 (H, W), 1 = follicular
    patch_labels: dict[PatchCoord, PatchLabel]

    def __post_init__(self):
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if self.mask.shape != (self.image.height, self.image.width):
            raise ValueError(f"mask shape {self.mask.shape} does not match image "
                             f"{self.image.height}x{self.image.width}")


def tile_grid(width: int, height: int, patch_size: int) -> list[PatchCoord]:
    """Full patches covering the slide in row-major order; border strips that
    do not fit a whole patch are dropped."""
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    rows, cols = height // patch_size, width // patch_size
    return [PatchCoord(row=r, col=c, x=c * patch_size, y=r * patch_size, size=patch_size)
            for r in range(rows) for c in range(cols)]


def extract_patch(slide: RgbImage, coord: PatchCoord) -> RgbImage:
    if coord.y + coord.size > slide.height or coord.x + coord.size > slide.width:
        raise ValueError(f"patch (row={coord.row}, col={coord.col}, size={coord.size}) "
                         f"exceeds slide {slide.width}x{slide.height}")
    crop = slide.pixels[coord.y:coord.y + coord.size, coord.x:coord.x + coord.size]
    return RgbImage(width=coord.size, height=coord.size, pixels=crop.copy())


def extract_mask_patch(mask: np.ndarray, coord: PatchCoord) -> np.ndarray:
    if coord.y + coord.size > mask.shape[0] or coord.x + coord.size > mask.shape[1]:
        raise ValueError(f"patch (row={coord.row}, col={coord.col}, size={coord.size}) "
                         f"exceeds mask {mask.shape[1]}x{mask.shape[0]}")
    return mask[coord.y:coord.y + coord.size, coord.x:coord.x + coord.size].copy()


def stitch(masks: list[tuple[PatchCoord, np.ndarray]], width: int, height: int) -> np.ndarray:
    """Assemble patch masks into a full-slide mask; uncovered pixels stay 0."""
    out = np.zeros((height, width), dtype=np.uint8)
    covered = np.zeros((height, width), dtype=bool)
    for coord, mask in masks:
        mask = np.asarray(mask)
        if mask.shape != (coord.size, coord.size):
            raise ValueError(f"mask shape {mask.shape} does not match patch size {coord.size}")
        if coord.y + coord.size > height or coord.x + coord.size > width:
            raise ValueError(f"patch (row={coord.row}, col={coord.col}) exceeds "
                             f"target {width}x{height}")
        region = (slice(coord.y, coord.y + coord.size), slice(coord.x, coord.x + coord.size))
        if covered[region].any():
            raise ValueError(f"patch (row={coord.row}, col={coord.col}) overlaps an "
                             f"already stitched region")
        covered[region] = True
        out[region] = (mask > 0).astype(np.uint8)
    return out


@dataclass(frozen=True)
class SlideParams:
    """Synthetic slide geometry and texture knobs.

    follicular_fraction_target caps how many grid cells receive a follicle
    cluster; t_follicular / t_colloid are the coverage fractions at which a
    patch is labeled Follicular / Colloid.
    """

    width: int = 384
    height: int = 384
    patch_size: int = 64
    n_follicle_clusters: int = 3
    n_colloid_blobs: int = 4
    follicular_fraction_target: float = 0.08
    t_follicular: float = 0.05
    t_colloid: float = 0.05
    noise_level: float = 6.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.patch_size < 1:
            raise ValueError("width, height and patch_size must be >= 1")
        if self.n_follicle_clusters < 0 or self.n_colloid_blobs < 0:
            raise ValueError("cluster/blob counts must be >= 0")
        if not 0.0 < self.t_follicular < 1.0 or not 0.0 < self.t_colloid < 1.0:
            raise ValueError("coverage thresholds must be in (0, 1)")
        if not 0.0 < self.follicular_fraction_target <= 1.0:
            raise ValueError("follicular_fraction_target must be in (0, 1]")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


_BACKGROUND = np.array([245.0, 243.0, 247.0])
_COLLOID = np.array([231.0, 205.0, 216.0])
_FOLLICLE = np.array([95.0, 68.0, 135.0])
_NUCLEUS = np.array([55.0, 38.0, 92.0])


def _ellipse_mask(height: int, width: int, cx: float, cy: float,
                  a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _render(seed: int, params: SlideParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one slide; returns (image uint8 HxWx3, follicle mask, visible colloid map)."""
    rng = np.random.default_rng(seed)
    h, w, s = params.height, params.width, params.patch_size
    cells = tile_grid(w, h, s)

    canvas = np.tile(_BACKGROUND, (h, w, 1))
    colloid = np.zeros((h, w), dtype=bool)
    mask = np.zeros((h, w), dtype=bool)

    for _ in range(params.n_colloid_blobs):
        color = _COLLOID + rng.uniform(-10, 10, size=3)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        for _ in range(rng.integers(2, 5)):
            ex = cx + rng.uniform(-0.4, 0.4) * s
            ey = cy + rng.uniform(-0.4, 0.4) * s
            a = rng.uniform(0.35, 0.8) * s
            b = rng.uniform(0.25, 0.6) * s
            blob = _ellipse_mask(h, w, ex, ey, a, b, rng.uniform(0, np.pi))
            canvas[blob] = color + rng.uniform(-4, 4, size=3)
            colloid |= blob

    if params.n_follicle_clusters > 0:
        if not cells:
            raise ValueError(f"infeasible geometry: patch_size {s} exceeds slide "
                             f"{w}x{h}, nowhere to place follicle clusters")
        k = min(params.n_follicle_clusters,
                max(1, round(params.follicular_fraction_target * len(cells))))
        chosen = rng.choice(len(cells), size=k, replace=False)
        for idx in chosen:
            cell = cells[idx]
            base = np.clip(_FOLLICLE + rng.uniform(-12, 12, size=3), 0, 255)
            n_cells = int(rng.integers(3, 7))
            for j in range(n_cells):
                # First ellipse is large enough to clear t_follicular on its own.
                frac = rng.uniform(0.16, 0.22) if j == 0 else rng.uniform(0.08, 0.16)
                a, b = frac * s, rng.uniform(0.8, 1.0) * frac * s
                margin = max(a, b) + 2.0
                ex = cell.x + rng.uniform(margin, s - margin)
                ey = cell.y + rng.uniform(margin, s - margin)
                body = _ellipse_mask(h, w, ex, ey, a, b, rng.uniform(0, np.pi))
                canvas[body] = base + rng.uniform(-6, 6, size=3)
                mask |= body
                for _ in range(rng.integers(1, 4)):
                    na, nb = rng.uniform(0.2, 0.4) * a, rng.uniform(0.2, 0.4) * b
                    nx = ex + rng.uniform(-0.4, 0.4) * a
                    ny = ey + rng.uniform(-0.4, 0.4) * b
                    nucleus = _ellipse_mask(h, w, nx, ny, na, nb, rng.uniform(0, np.pi))
                    canvas[nucleus] = _NUCLEUS + rng.uniform(-8, 8, size=3)
                    mask |= nucleus

    if params.noise_level > 0:
        canvas = canvas + rng.normal(0.0, params.noise_level, size=canvas.shape)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return image, mask.astype(np.uint8), (colloid & ~mask.astype(bool))


def patch_labels_from_maps(mask: np.ndarray, colloid: np.ndarray,
                           params: SlideParams) -> dict[PatchCoord, PatchLabel]:
    """Label each grid cell from coverage: Follicular wins, then Colloid."""
    labels: dict[PatchCoord, PatchLabel] = {}
    for coord in tile_grid(params.width, params.height, params.patch_size):
        region = (slice(coord.y, coord.y + coord.size), slice(coord.x, coord.x + coord.size))
        if mask[region].mean() >= params.t_follicular:
            labels[coord] = PatchLabel.FOLLICULAR
        elif colloid[region].mean() >= params.t_colloid:
            labels[coord] = PatchLabel.COLLOID
        else:
            labels[coord] = PatchLabel.NONINFO
    return labels


def synth_slide(seed: int, params: SlideParams = SlideParams()) -> LabeledSlide:
    """Deterministic synthetic labeled slide for the given seed."""
    image, mask, colloid = _render(seed, params)
    labels = patch_labels_from_maps(mask, colloid, params)
    return LabeledSlide(image=RgbImage.from_array(image), mask=mask, patch_labels=labels)


def write_patch_labels(path: str | Path, labels: dict[PatchCoord, PatchLabel]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "label"])
        for coord in sorted(labels, key=lambda c: (c.row, c.col)):
            writer.writerow([coord.row, coord.col, labels[coord].value])


def read_patch_labels(path: str | Path, patch_size: int) -> dict[PatchCoord, PatchLabel]:
    labels: dict[PatchCoord, PatchLabel] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["row", "col", "label"]:
            raise ValueError(f"{path}: unexpected label CSV header {header}")
        for row, col, label in reader:
            r, c = int(row), int(col)
            coord = PatchCoord(row=r, col=c, x=c * patch_size, y=r * patch_size,
                               size=patch_size)
            labels[coord] = PatchLabel(label)
    return labels


@dataclass(frozen=True)
class ManifestEntry:
    role: str  # "train" or "wsi-test"
    slide: Path
    mask: Path
    labels: Path


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    """One tab-separated line per slide: role, slide, mask, labels (paths
    relative to the manifest file)."""
    path = Path(path)
    lines = []
    for e in entries:
        lines.append("\t".join([e.role, str(e.slide), str(e.mask), str(e.labels)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        role, slide, mask, labels = parts
        if role not in ("train", "wsi-test"):
            raise ValueError(f"{path}:{lineno}: unknown role {role!r}")
        entries.append(ManifestEntry(role=role, slide=base / slide,
                                     mask=base / mask, labels=base / labels))
    return entries
