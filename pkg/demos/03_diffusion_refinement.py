#!/usr/bin/env python3
"""The conditional diffusion refiner: schedule, forward noising, overfit, sampling."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dpr.data import ImageSample, SceneConfig, downsample_image, generate_synthetic_scene
from dpr.evaluation import psnr, ssim
from dpr.refiner import (
    PatchPair,
    RefinerConfig,
    RefinerTrainConfig,
    enlarge,
    forward_noising,
    from_diffusion_range,
    init_refiner,
    make_schedule,
    sample,
    to_diffusion_range,
    train_refiner,
)

out = Path(__file__).parent / "output"
out.mkdir(exist_ok=True)
rng = np.random.default_rng(0)

# --- the variance schedule ----------------------------------------------------
sched = make_schedule(200, 1e-4, 0.05)
fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
axes[0].plot(sched.beta)
axes[0].set_title("beta_t")
axes[1].plot(sched.alpha_bar)
axes[1].set_title("cumulative alpha_bar_t")
for ax in axes:
    ax.set_xlabel("t")
fig.tight_layout()
fig.savefig(out / "schedule.png", dpi=110)
print(f"alpha_bar at T: {sched.alpha_bar[-1]:.5f} (close to pure noise)")

# --- forward noising of a patch ------------------------------------------------
scene = generate_synthetic_scene(
    SceneConfig(image_size=64, min_objects=1, max_objects=1,
                min_object_px=14, max_object_px=16, background_noise=0.03), seed=9)
b = scene.boxes[0]
cy, cx = int((b.y_min + b.y_max) / 2), int((b.x_min + b.x_max) / 2)
y0 = int(np.clip(cy - 16, 0, 32))
x0 = int(np.clip(cx - 16, 0, 32))
x_hi = scene.pixels[y0:y0 + 32, x0:x0 + 32]
x_signed = to_diffusion_range(x_hi)

steps = (1, 50, 120, 200)
fig, axes = plt.subplots(1, len(steps) + 1, figsize=(13, 3))
axes[0].imshow(x_hi)
axes[0].set_title("x0")
for ax, t in zip(axes[1:], steps):
    noisy = forward_noising(x_signed, t, rng.standard_normal(x_signed.shape), sched)
    ax.imshow(from_diffusion_range(noisy))
    ax.set_title(f"t={t}")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "forward_noising.png", dpi=110)
print(f"wrote {out / 'forward_noising.png'}")

# --- overfit one pair and sample ------------------------------------------------
# short budget for a demo; the acceptance suite runs the full-strength version
z_lo = downsample_image(ImageSample(x_hi.copy()), 4, method="area").pixels
pair = PatchPair(to_diffusion_range(z_lo), x_signed, 4)
model = init_refiner(RefinerConfig(scale=4, channels=3, base_channels=16,
                                   channel_mults=(1, 2, 4), seed=0))
model, history = train_refiner(
    model, [pair], sched,
    RefinerTrainConfig(steps=400, lr=2.5e-3, lr_final=5e-4, batch_size=8, seed=0))
print(f"loss {history[0]['loss']:.3f} -> {history[-1]['smoothed_loss']:.3f} over 400 steps")

refined = from_diffusion_range(sample(model, pair.z, sched, seed=1))
bilinear = enlarge(z_lo, 4, "bilinear")
nearest = enlarge(z_lo, 4, "nearest")

fig, axes = plt.subplots(1, 5, figsize=(14, 3))
for ax, (img, title) in zip(axes, [
    (z_lo, "input 8x8"),
    (nearest, f"nearest {psnr(nearest, x_hi):.1f} dB"),
    (bilinear, f"bilinear {psnr(bilinear, x_hi):.1f} dB"),
    (refined, f"diffusion {psnr(refined, x_hi):.1f} dB"),
    (x_hi, "ground truth 32x32"),
]):
    ax.imshow(img, interpolation="none")
    ax.set_title(title, fontsize=9)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "refinement.png", dpi=130)
print(f"wrote {out / 'refinement.png'}")
print(f"SSIM: bilinear {ssim(bilinear, x_hi):.3f} vs diffusion {ssim(refined, x_hi):.3f}")
