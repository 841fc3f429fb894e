"""Split images into an indexed tile grid and reassemble processed tiles.

Tiles are non-overlapping and carry their (row, col) index plus a polarity flag,
so assembly needs no external mask: the black-negatives mode zeroes every tile
tagged negative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass
class IndexedPatch:
    tile: np.ndarray
    row: int
    col: int
    polarity: str = POSITIVE


@dataclass
class IndexedPatchSet:
    """Complete set of G*G uniformly sized tiles for one image."""

    patches: list[IndexedPatch]
    grid: int
    patch_px: int
    image_id: str = ""


def partition(image: np.ndarray, grid: int, mask: np.ndarray | None = None,
              image_id: str = "") -> IndexedPatchSet:
    """Cut an (H, W, C) image into grid x grid tiles in row-major order.

    ``mask`` optionally assigns polarity per cell (truthy = positive); without it
    every tile is positive.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w = image.shape[:2]
    if grid < 1 or h % grid or w % grid or h != w:
        raise ValueError(f"image dims {h}x{w} must be square and divisible by grid {grid}")
    if mask is not None and np.asarray(mask).shape != (grid, grid):
        raise ValueError(f"mask shape {np.asarray(mask).shape} != grid ({grid}, {grid})")
    p = h // grid
    patches = []
    for r in range(grid):
        for c in range(grid):
            pol = POSITIVE if mask is None or mask[r, c] else NEGATIVE
            patches.append(IndexedPatch(image[r * p:(r + 1) * p, c * p:(c + 1) * p].copy(), r, c, pol))
    return IndexedPatchSet(patches, grid, p, image_id)


def organize(patch_set: IndexedPatchSet, mode: str = "full") -> np.ndarray:
    """Place tiles by index into one image of side grid * tile_side.

    ``mode="black_negatives"`` writes zeros where a tile is tagged negative.
    Raises on missing or duplicate indices, naming the offenders.
    """
    if mode not in ("full", "black_negatives"):
        raise ValueError(f"unknown mode {mode!r}")
    g = patch_set.grid
    if not patch_set.patches:
        raise ValueError("empty patch set")
    tile_shape = patch_set.patches[0].tile.shape
    seen: set[tuple[int, int]] = set()
    dup = []
    for p in patch_set.patches:
        if p.tile.shape != tile_shape:
            raise ValueError(
                f"tile ({p.row}, {p.col}) has shape {p.tile.shape}, expected {tile_shape}"
            )
        if (p.row, p.col) in seen:
            dup.append((p.row, p.col))
        seen.add((p.row, p.col))
    missing = sorted({(r, c) for r in range(g) for c in range(g)} - seen)
    if dup or missing:
        raise ValueError(f"bad index coverage: duplicates={sorted(dup)} missing={missing}")

    side = tile_shape[0]
    out = np.zeros((g * side, g * side, tile_shape[2]), dtype=patch_set.patches[0].tile.dtype)
    for p in patch_set.patches:
        tile = np.zeros_like(p.tile) if (mode == "black_negatives" and p.polarity == NEGATIVE) else p.tile
        out[p.row * side:(p.row + 1) * side, p.col * side:(p.col + 1) * side] = tile
    return out


def save_patch_set(patch_set: IndexedPatchSet, root: str | Path) -> None:
    """Directory of PNG tiles named <image_id>_r<row>_c<col>.png plus a JSON index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {
        "image_id": patch_set.image_id,
        "grid": patch_set.grid,
        "patch_px": patch_set.patch_px,
        "tiles": [],
    }
    for p in patch_set.patches:
        name = f"{patch_set.image_id}_r{p.row}_c{p.col}.png"
        arr = np.clip(np.round(np.asarray(p.tile) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(root / name)
        index["tiles"].append({"file": name, "row": p.row, "col": p.col, "polarity": p.polarity})
    (root / f"{patch_set.image_id}_index.json").write_text(json.dumps(index, sort_keys=True))


def load_patch_set(root: str | Path, image_id: str) -> IndexedPatchSet:
    root = Path(root)
    index = json.loads((root / f"{image_id}_index.json").read_text())
    patches = []
    for rec in index["tiles"]:
        arr = np.asarray(Image.open(root / rec["file"]))
        if arr.ndim == 2:
            arr = arr[:, :, None]
        patches.append(IndexedPatch(arr.astype(np.float64) / 255.0, rec["row"], rec["col"],
                                    rec["polarity"]))
    return IndexedPatchSet(patches, index["grid"], index["patch_px"], image_id)
