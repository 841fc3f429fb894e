"""Synthetic scenes, annotations, ratio-based partitioning, and pyramid patch labels.

Box/pixel convention used throughout: a pixel with integer index ``j`` covers the
half-open interval ``[j, j+1)`` on its axis. A box or grid cell counts a pixel as
covered iff their intervals overlap with positive length, so boxes that only touch
a boundary contribute nothing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

_INTERP = {
    "bilinear": cv2.INTER_LINEAR,
    "nearest": cv2.INTER_NEAREST,
    "bicubic": cv2.INTER_CUBIC,
    "area": cv2.INTER_AREA,
}


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image pixel coordinates, corners (x_min, y_min)-(x_max, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max}): "
                "corners must satisfy x_min < x_max and y_min < y_max"
            )

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(
            self.x_min * factor, self.y_min * factor,
            self.x_max * factor, self.y_max * factor, self.class_id,
        )

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max, self.class_id]


@dataclass
class ImageSample:
    """One annotated image: pixels in [0, 1] of shape (H, W, C) plus boxes."""

    pixels: np.ndarray
    boxes: list[BoundingBox] = field(default_factory=list)
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be (H, W, C) with H, W > 0, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixels contain non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px
        h, w = px.shape[:2]
        for b in self.boxes:
            if b.x_max <= 0 or b.y_max <= 0 or b.x_min >= w or b.y_min >= h:
                raise ValueError(f"box {b} lies entirely outside the {h}x{w} image")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchLabelPyramid:
    """Binary object-presence grids, finest first. Grid k is consistent with grid k+1."""

    grids: list[np.ndarray]

    def __post_init__(self):
        self.grids = [np.asarray(g, dtype=np.uint8) for g in self.grids]
        for g in self.grids:
            if not np.isin(g, (0, 1)).all():
                raise ValueError("label grids must be binary")

    @property
    def y1(self) -> np.ndarray:
        return self.grids[0]

    @property
    def y2(self) -> np.ndarray:
        return self.grids[1]

    @property
    def y3(self) -> np.ndarray:
        return self.grids[2]


@dataclass
class ManifestEntry:
    id: str
    object_pixel_ratio: float
    split: str = "train"


@dataclass
class DatasetManifest:
    """Ordered list of sample references with per-sample object pixel ratio and split tag."""

    entries: list[ManifestEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self, split: str | None = None) -> list[str]:
        return [e.id for e in self.entries if split is None or e.split == split]

    def to_json(self) -> str:
        recs = [
            {"id": e.id, "object_pixel_ratio": e.object_pixel_ratio, "split": e.split}
            for e in self.entries
        ]
        return json.dumps({"samples": recs}, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return DatasetManifest(
            [ManifestEntry(r["id"], float(r["object_pixel_ratio"]), r.get("split", "train"))
             for r in doc["samples"]]
        )


def _pixel_span(lo: float, hi: float, limit: int) -> tuple[int, int]:
    """Index range [start, stop) of unit cells [j, j+1) overlapping [lo, hi)."""
    start = max(0, math.floor(lo))
    stop = min(limit, math.ceil(hi))
    return start, stop


def rasterize_boxes(boxes: list[BoundingBox], image_dims: tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask of pixels overlapped by at least one box."""
    h, w = image_dims
    mask = np.zeros((h, w), dtype=bool)
    for b in boxes:
        y0, y1 = _pixel_span(b.y_min, b.y_max, h)
        x0, x1 = _pixel_span(b.x_min, b.x_max, w)
        if y1 > y0 and x1 > x0:
            mask[y0:y1, x0:x1] = True
    return mask


def object_pixel_ratio(sample: ImageSample) -> float:
    """Fraction of image pixels covered by the union of boxes (overlaps counted once)."""
    if not sample.boxes:
        return 0.0
    mask = rasterize_boxes(sample.boxes, (sample.height, sample.width))
    return float(np.clip(mask.mean(), 0.0, 1.0))


def partition_by_ratio(manifest: DatasetManifest, low: float, high: float) -> DatasetManifest:
    """Sub-manifest of samples with low <= ratio < high, order preserved.

    high == 1.0 is treated inclusively so the full range keeps full-cover samples.
    """
    if not (0.0 <= low < high <= 1.0):
        raise ValueError(f"require 0 <= low < high <= 1, got ({low}, {high})")

    def keep(r: float) -> bool:
        return low <= r < high or (high == 1.0 and r == 1.0)

    return DatasetManifest([e for e in manifest.entries if keep(e.object_pixel_ratio)])


def build_pyramid_labels(
    boxes: list[BoundingBox],
    image_dims: tuple[int, int],
    grids: list[int],
) -> PatchLabelPyramid:
    """Binary G x G presence grids: a cell is 1 iff its pixel region overlaps a box.

    ``grids`` must be ordered fine to coarse and every grid must divide both image
    dims. Consistency across scales holds by construction for nested grids.
    """
    h, w = image_dims
    if any(grids[i] <= grids[i + 1] for i in range(len(grids) - 1)):
        raise ValueError(f"grids must be sorted fine to coarse, got {grids}")
    out = []
    for g in grids:
        if g < 1 or h % g or w % g:
            raise ValueError(f"grid {g} does not divide image dims {h}x{w}")
        cell_h, cell_w = h // g, w // g
        grid = np.zeros((g, g), dtype=np.uint8)
        for b in boxes:
            r0, r1 = _pixel_span(b.y_min / cell_h, b.y_max / cell_h, g)
            c0, c1 = _pixel_span(b.x_min / cell_w, b.x_max / cell_w, g)
            if r1 > r0 and c1 > c0:
                grid[r0:r1, c0:c1] = 1
        out.append(grid)
    return PatchLabelPyramid(out)


@dataclass
class SceneConfig:
    """Knobs for the synthetic scene generator.

    Objects are bright textured rectangles (class 0) and discs (class 1) on a dark
    noisy background, so object presence is decidable from local intensity alone.
    When ``target_ratio`` is set, object sizes are derived from it and the size
    range is ignored.
    """

    image_size: int = 64
    channels: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_object_px: int = 6
    max_object_px: int = 12
    background_level: float = 0.18
    background_noise: float = 0.10
    target_ratio: float | None = None

    def __post_init__(self):
        if self.image_size < 4:
            raise ValueError("image_size must be at least 4")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not (0 <= self.min_objects <= self.max_objects):
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not (2 <= self.min_object_px <= self.max_object_px):
            raise ValueError("need 2 <= min_object_px <= max_object_px")
        if self.max_object_px >= self.image_size:
            raise ValueError(
                f"objects of {self.max_object_px}px do not fit a {self.image_size}px image"
            )
        if self.background_level + self.background_noise > 0.45:
            raise ValueError("background must stay below 0.45 to keep objects high-contrast")
        if self.target_ratio is not None and not (0 < self.target_ratio < 0.5):
            raise ValueError("target_ratio must lie in (0, 0.5)")


def _object_dims(cfg: SceneConfig, rng: np.random.Generator, count: int) -> list[tuple[int, int]]:
    dims = []
    side = cfg.image_size
    for _ in range(count):
        if cfg.target_ratio is not None:
            area = cfg.target_ratio * side * side / max(count, 1)
            area *= rng.uniform(0.8, 1.2)
            aspect = rng.uniform(0.7, 1.4)
            w = int(round(math.sqrt(area * aspect)))
            h = int(round(area / max(w, 1)))
        else:
            w = int(rng.integers(cfg.min_object_px, cfg.max_object_px + 1))
            h = int(rng.integers(cfg.min_object_px, cfg.max_object_px + 1))
        w = min(max(w, 2), side - 1)
        h = min(max(h, 2), side - 1)
        dims.append((w, h))
    return dims


def _texture(rng: np.random.Generator, h: int, w: int, channels: int) -> np.ndarray:
    """Bright textured tile, values in [0.55, 1.0]."""
    base = rng.uniform(0.70, 0.92, size=channels)
    kind = rng.integers(0, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    period = int(rng.integers(2, 5))
    if kind == 0:
        pattern = (xx // period) % 2
    elif kind == 1:
        pattern = (yy // period) % 2
    else:
        pattern = ((xx // period) + (yy // period)) % 2
    tile = base[None, None, :] + 0.08 * (pattern[:, :, None] * 2 - 1)
    return np.clip(tile, 0.55, 1.0)


def generate_synthetic_scene(config: SceneConfig, seed: int) -> ImageSample:
    """Deterministic synthetic scene with exact box annotations.

    Output is bit-identical for a fixed (config, seed). Objects are placed without
    overlap where possible; an object that cannot be placed after a fixed number
    of attempts is dropped.
    """
    rng = np.random.default_rng(seed)
    side, ch = config.image_size, config.channels
    img = config.background_level + config.background_noise * rng.random((side, side, ch))

    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    boxes: list[BoundingBox] = []
    for w, h in _object_dims(config, rng, count):
        placed = None
        for _ in range(200):
            x0 = int(rng.integers(0, side - w + 1))
            y0 = int(rng.integers(0, side - h + 1))
            cand = (x0 - 2, y0 - 2, x0 + w + 2, y0 + h + 2)
            if all(
                cand[0] >= b.x_max or cand[2] <= b.x_min or cand[1] >= b.y_max or cand[3] <= b.y_min
                for b in boxes
            ):
                placed = (x0, y0)
                break
        if placed is None:
            continue
        x0, y0 = placed
        tile = _texture(rng, h, w, ch)
        is_disc = rng.random() < 0.5
        if is_disc:
            yy, xx = np.mgrid[0:h, 0:w] + 0.5
            inside = ((xx / w - 0.5) ** 2 + (yy / h - 0.5) ** 2) <= 0.25
            region = img[y0:y0 + h, x0:x0 + w]
            img[y0:y0 + h, x0:x0 + w] = np.where(inside[:, :, None], tile, region)
        else:
            img[y0:y0 + h, x0:x0 + w] = tile
        boxes.append(BoundingBox(x0, y0, x0 + w, y0 + h, class_id=1 if is_disc else 0))

    img = np.clip(img, 0.0, 1.0)
    return ImageSample(pixels=img.astype(np.float64), boxes=boxes, id=f"scene_{seed:08d}")


def downsample_image(sample: ImageSample, factor: int, method: str = "area") -> ImageSample:
    """Shrink an image by an integer factor, rescaling its boxes by 1/factor."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return ImageSample(sample.pixels.copy(), list(sample.boxes), sample.id)
    h, w = sample.height, sample.width
    if h % factor or w % factor:
        raise ValueError(f"image dims {h}x{w} not divisible by factor {factor}")
    if method not in _INTERP:
        raise ValueError(f"unknown method {method!r}, expected one of {sorted(_INTERP)}")
    px = cv2.resize(
        np.ascontiguousarray(sample.pixels),
        (w // factor, h // factor),
        interpolation=_INTERP[method],
    )
    if px.ndim == 2:
        px = px[:, :, None]
    px = np.clip(px, 0.0, 1.0)
    boxes = [b.scaled(1.0 / factor) for b in sample.boxes]
    return ImageSample(px, boxes, sample.id)


# ---------------------------------------------------------------------------
# Disk layout: images/<id>.png + annotations.jsonl, manifest.json, labels/*.json
# ---------------------------------------------------------------------------

def save_dataset(samples: list[ImageSample], root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "annotations.jsonl", "w") as fh:
        for s in samples:
            arr = np.clip(np.round(s.pixels * 255.0), 0, 255).astype(np.uint8)
            img = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
            img.save(root / "images" / f"{s.id}.png")
            rec = {
                "id": s.id,
                "width": s.width,
                "height": s.height,
                "boxes": [b.as_list() for b in s.boxes],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(root: str | Path, ids: list[str] | None = None) -> list[ImageSample]:
    root = Path(root)
    wanted = set(ids) if ids is not None else None
    samples = []
    with open(root / "annotations.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            if wanted is not None and rec["id"] not in wanted:
                continue
            arr = np.asarray(Image.open(root / "images" / f"{rec['id']}.png"))
            if arr.ndim == 2:
                arr = arr[:, :, None]
            boxes = [BoundingBox(*map(float, b[:4]), class_id=int(b[4])) for b in rec["boxes"]]
            samples.append(ImageSample(arr.astype(np.float64) / 255.0, boxes, rec["id"]))
    if wanted is not None:
        order = {sid: i for i, sid in enumerate(ids)}
        samples.sort(key=lambda s: order[s.id])
    return samples


def build_manifest(samples: list[ImageSample], val_fraction: float = 0.2) -> DatasetManifest:
    """Manifest with ratios; the trailing val_fraction of samples is tagged 'val'."""
    n_val = int(round(len(samples) * val_fraction))
    n_train = len(samples) - n_val
    return DatasetManifest(
        [
            ManifestEntry(s.id, object_pixel_ratio(s), "train" if i < n_train else "val")
            for i, s in enumerate(samples)
        ]
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(manifest.to_json())


def load_manifest(path: str | Path) -> DatasetManifest:
    return DatasetManifest.from_json(Path(path).read_text())


def save_labels(pyramid: PatchLabelPyramid, sample_id: str, root: str | Path) -> Path:
    """One JSON file per sample: each grid flattened row-major."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    doc = {
        "id": sample_id,
        "grids": [
            {"size": int(g.shape[0]), "cells": g.flatten().tolist()} for g in pyramid.grids
        ],
    }
    path = root / f"{sample_id}.json"
    path.write_text(json.dumps(doc, sort_keys=True))
    return path


def load_labels(sample_id: str, root: str | Path) -> PatchLabelPyramid:
    doc = json.loads((Path(root) / f"{sample_id}.json").read_text())
    return PatchLabelPyramid(
        [np.asarray(g["cells"], dtype=np.uint8).reshape(g["size"], g["size"])
         for g in doc["grids"]]
    )
