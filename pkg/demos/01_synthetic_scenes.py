#!/usr/bin/env python3
"""Walk through the synthetic data layer: scenes, ratios, and pyramid labels."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import matplotlib.patches as mpatches
import numpy as np

from dpr.data import (
    SceneConfig,
    build_manifest,
    build_pyramid_labels,
    generate_synthetic_scene,
    object_pixel_ratio,
    partition_by_ratio,
)

out = Path(__file__).parent / "output"
out.mkdir(exist_ok=True)

# --- scenes at two object-pixel-ratio regimes -------------------------------
# "far" scenes mimic distant objects (tiny ratio); "near" scenes larger ones.
far_cfg = SceneConfig(image_size=128, min_objects=1, max_objects=3, target_ratio=0.012)
near_cfg = SceneConfig(image_size=128, min_objects=2, max_objects=3,
                       min_object_px=28, max_object_px=48)

fig, axes = plt.subplots(2, 4, figsize=(13, 7))
for col in range(4):
    for row, cfg in enumerate((far_cfg, near_cfg)):
        scene = generate_synthetic_scene(cfg, seed=40 + col)
        ax = axes[row, col]
        ax.imshow(scene.pixels)
        for b in scene.boxes:
            ax.add_patch(mpatches.Rectangle((b.x_min, b.y_min), b.x_max - b.x_min,
                                            b.y_max - b.y_min, fill=False, color="red"))
        ax.set_title(f"ratio {object_pixel_ratio(scene):.3f}")
        ax.axis("off")
axes[0, 0].set_ylabel("far (<1.5%)")
fig.suptitle("synthetic scenes: textured rectangles and discs with exact boxes")
fig.tight_layout()
fig.savefig(out / "scenes.png", dpi=110)
print(f"wrote {out / 'scenes.png'}")

# --- manifest partitioning by ratio band ------------------------------------
samples = [generate_synthetic_scene(far_cfg, seed=s) for s in range(30)]
samples += [generate_synthetic_scene(near_cfg, seed=100 + s) for s in range(30)]
for i, s in enumerate(samples):
    s.id = f"demo_{i:03d}"
manifest = build_manifest(samples, val_fraction=0.2)
tiny = partition_by_ratio(manifest, 0.0, 0.03)
big = partition_by_ratio(manifest, 0.03, 1.0)
print(f"{len(manifest)} samples total: {len(tiny)} in [0, 3%) and {len(big)} in [3%, 100%]")

# --- pyramid labels for one scene --------------------------------------------
scene = generate_synthetic_scene(far_cfg, seed=44)
pyramid = build_pyramid_labels(scene.boxes, (128, 128), [32, 16, 8])
fig, axes = plt.subplots(1, 4, figsize=(13, 3.4))
axes[0].imshow(scene.pixels)
axes[0].set_title("scene")
for ax, grid in zip(axes[1:], pyramid.grids):
    ax.imshow(grid, cmap="gray_r", vmin=0, vmax=1)
    ax.set_title(f"object-presence {grid.shape[0]}x{grid.shape[0]}")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "pyramid_labels.png", dpi=110)
print(f"wrote {out / 'pyramid_labels.png'}")

# a coarse cell is positive exactly when one of its finer children is
fine = pyramid.grids[0]
for coarse in pyramid.grids[1:]:
    g = coarse.shape[0]
    ratio = fine.shape[0] // g
    pooled = fine.reshape(g, ratio, g, ratio).max(axis=(1, 3))
    assert np.array_equal(pooled, coarse)
    fine = coarse
print("pyramid consistency check passed")
