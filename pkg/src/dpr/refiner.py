"""Conditional denoising diffusion for patch super-resolution, plus interpolation
upscaling for patches that skip refinement.

The forward process corrupts a high-res patch x0 over T steps with variance-
preserving Gaussian noise; a U-Net style predictor, conditioned on the low-res
patch, is trained to recover the injected noise; ancestral sampling inverts the
chain. Patches live in [-1, 1] while diffusing and [0, 1] everywhere else.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

_ENLARGE_INTERP = {
    "bilinear": cv2.INTER_LINEAR,
    "nearest": cv2.INTER_NEAREST,
    "bicubic": cv2.INTER_CUBIC,
}


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep variance parameters; arrays are float64 indexed by t-1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def save_schedule_csv(sched: NoiseSchedule, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "beta_t", "alpha_bar_t"])
        for t in range(1, sched.T + 1):
            writer.writerow([t, repr(float(sched.beta[t - 1])), repr(float(sched.alpha_bar[t - 1]))])


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not (1 <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")


def forward_noising(x0, t: int, eps, sched: NoiseSchedule):
    """Noisy state at step t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Works on numpy arrays and torch tensors alike; eps must match x0's shape.
    """
    _check_t(t, sched)
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = sched.alpha_bar[t - 1]
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


# ---------------------------------------------------------------------------
# Patch pairs
# ---------------------------------------------------------------------------

@dataclass
class PatchPair:
    """Low-res conditioning patch and its high-res target, both in [-1, 1]."""

    z: np.ndarray
    x0: np.ndarray
    scale: int

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.z.ndim == 2:
            self.z = self.z[:, :, None]
        if self.x0.ndim == 2:
            self.x0 = self.x0[:, :, None]
        zh, zw, zc = self.z.shape
        xh, xw, xc = self.x0.shape
        if (xh, xw, xc) != (zh * self.scale, zw * self.scale, zc):
            raise ValueError(
                f"x0 shape {self.x0.shape} is not z shape {self.z.shape} scaled by {self.scale}"
            )
        for name, arr in (("z", self.z), ("x0", self.x0)):
            if arr.min() < -1.0 or arr.max() > 1.0:
                raise ValueError(f"{name} values outside [-1, 1]")


def to_diffusion_range(x: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1]."""
    return np.asarray(x, dtype=np.float64) * 2.0 - 1.0


def from_diffusion_range(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1], clipped."""
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Noise predictor network
# ---------------------------------------------------------------------------

@dataclass
class RefinerConfig:
    scale: int = 8
    channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    blocks_per_level: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.scale < 1 or self.base_channels < 4 or self.channels < 1:
            raise ValueError("invalid refiner config")
        self.channel_mults = tuple(int(m) for m in self.channel_mults)


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.device, t.dtype if t.is_floating_point() else torch.float32)
    args = t.float()[:, None] * freqs[None, :].float()
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, ch), ch)


class _ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, ch_out)
        self.norm2 = _norm(ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class RefinerModel(nn.Module):
    """Encoder-decoder noise predictor over the high-res grid.

    Input is the noisy high-res state concatenated channelwise with the low-res
    patch upsampled bilinearly to the target resolution; a sinusoidal timestep
    embedding modulates every residual block.
    """

    def __init__(self, config: RefinerConfig):
        super().__init__()
        self.config = config
        c = config.channels
        base = config.base_channels
        temb_dim = base * 4
        self.temb = nn.Sequential(
            nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.conv_in = nn.Conv2d(2 * c, base, 3, padding=1)

        chs = [base * m for m in config.channel_mults]
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = base
        skip_chs = [ch]
        for li, out_ch in enumerate(chs):
            blocks = nn.ModuleList()
            for _ in range(config.blocks_per_level):
                blocks.append(_ResBlock(ch, out_ch, temb_dim))
                ch = out_ch
                skip_chs.append(ch)
            self.down_blocks.append(blocks)
            if li < len(chs) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_chs.append(ch)

        self.mid = _ResBlock(ch, ch, temb_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for li, out_ch in reversed(list(enumerate(chs))):
            blocks = nn.ModuleList()
            for _ in range(config.blocks_per_level + 1):
                blocks.append(_ResBlock(ch + skip_chs.pop(), out_ch, temb_dim))
                ch = out_ch
            self.up_blocks.append(blocks)
            if li > 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, c, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Predict the injected noise; all tensors NCHW, t of shape (B,)."""
        k, levels = self.config.scale, len(self.config.channel_mults)
        if x_t.shape[-2:] != (z.shape[-2] * k, z.shape[-1] * k):
            raise ValueError(f"x_t dims {tuple(x_t.shape[-2:])} != z dims scaled by {k}")
        if x_t.shape[-1] % (1 << (levels - 1)) or x_t.shape[-2] % (1 << (levels - 1)):
            raise ValueError(
                f"patch side {tuple(x_t.shape[-2:])} must be divisible by {1 << (levels - 1)}"
            )
        zu = F.interpolate(z, scale_factor=self.config.scale, mode="bilinear",
                           align_corners=False)
        temb = self.temb(_timestep_embedding(t, self.config.base_channels).to(x_t.dtype))
        h = self.conv_in(torch.cat([x_t, zu], dim=1))
        skips = [h]
        for li, blocks in enumerate(self.down_blocks):
            for blk in blocks:
                h = blk(h, temb)
                skips.append(h)
            if li < len(self.down_blocks) - 1:
                h = self.downsamples[li](h)
                skips.append(h)
        h = self.mid(h, temb)
        for ui, blocks in enumerate(self.up_blocks):
            for blk in blocks:
                h = blk(torch.cat([h, skips.pop()], dim=1), temb)
            if ui < len(self.up_blocks) - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[ui](h)
        return self.conv_out(F.silu(self.norm_out(h)))

    @torch.no_grad()
    def predict(self, z: np.ndarray, x_t: np.ndarray, t: int) -> np.ndarray:
        """Numpy convenience wrapper: (H, W, C) in, (kH, kW, C) out."""
        dtype = next(self.parameters()).dtype
        zb = torch.from_numpy(np.ascontiguousarray(z)).permute(2, 0, 1)[None].to(dtype)
        xb = torch.from_numpy(np.ascontiguousarray(x_t)).permute(2, 0, 1)[None].to(dtype)
        out = self.forward(zb, xb, torch.tensor([t]))
        return out[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)


def init_refiner(config: RefinerConfig) -> RefinerModel:
    """Deterministically initialized noise predictor."""
    torch.manual_seed(config.seed)
    model = RefinerModel(config)
    model.eval()
    return model


def refiner_forward_flops(config: RefinerConfig, patch_px: int) -> float:
    """Rough FLOPs of one predictor forward pass on a patch_px low-res patch."""
    side = patch_px * config.scale
    c = config.channels
    base = config.base_channels
    chs = [base * m for m in config.channel_mults]
    total = 2.0 * 9 * (2 * c) * base * side * side
    ch, s = base, side
    for li, out_ch in enumerate(chs):
        for _ in range(config.blocks_per_level):
            total += 2.0 * 9 * (ch + out_ch) * out_ch * s * s
            ch = out_ch
        if li < len(chs) - 1:
            total += 2.0 * 9 * ch * ch * (s // 2) ** 2
            s //= 2
    total *= 2.5  # decoder path plus mid block, roughly symmetric with skips
    return float(total)


# ---------------------------------------------------------------------------
# Training objective
# ---------------------------------------------------------------------------

def _as_batch(arr: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)[None].to(dtype)


def cdm_loss(predictor, pair: PatchPair, t: int, eps: np.ndarray, sched: NoiseSchedule):
    """Mean squared error between predicted and injected noise at step t.

    ``predictor`` is any callable (z, x_t, t) -> tensor over NCHW torch tensors;
    the returned loss is a torch scalar differentiable through the predictor.
    """
    _check_t(t, sched)
    if tuple(eps.shape) != tuple(pair.x0.shape):
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(pair.x0.shape)}")
    dtype = torch.float64
    if isinstance(predictor, nn.Module):
        dtype = next(predictor.parameters()).dtype
    x0 = _as_batch(pair.x0, dtype)
    z = _as_batch(pair.z, dtype)
    eps_t = _as_batch(eps, dtype)
    x_tilde = forward_noising(x0, t, eps_t, sched)
    pred = predictor(z, x_tilde, torch.tensor([t]))
    if pred.shape != eps_t.shape:
        raise ValueError(f"predictor output shape {tuple(pred.shape)} != {tuple(eps_t.shape)}")
    return ((pred - eps_t) ** 2).mean()


@dataclass
class RefinerTrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    lr_final: float | None = None     # linear decay target; None keeps lr constant
    batch_size: int = 16
    seed: int = 0
    ema: float = 0.98
    log_every: int = 50


def train_refiner(
    model: RefinerModel,
    pairs: list[PatchPair],
    sched: NoiseSchedule,
    train_cfg: RefinerTrainConfig | None = None,
) -> tuple[RefinerModel, list[dict]]:
    """Stochastic noise-prediction training loop.

    Each step draws pairs uniformly, a timestep uniform in [1, T] and unit
    Gaussian noise per pair, then takes one adaptive-moment gradient step on the
    batch-mean loss. Deterministic for a fixed seed.
    """
    if not pairs:
        raise ValueError("no training pairs")
    cfg = train_cfg or RefinerTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history: list[dict] = []
    smoothed = None
    model.train()
    for step in range(cfg.steps):
        if cfg.lr_final is not None and cfg.steps > 1:
            frac = step / (cfg.steps - 1)
            for group in opt.param_groups:
                group["lr"] = cfg.lr + (cfg.lr_final - cfg.lr) * frac
        idx = rng.integers(0, len(pairs), size=cfg.batch_size)
        ts = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        z = torch.stack([_as_batch(pairs[i].z, dtype)[0] for i in idx])
        x0 = torch.stack([_as_batch(pairs[i].x0, dtype)[0] for i in idx])
        eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape))).to(dtype)
        abar = torch.from_numpy(sched.alpha_bar[ts - 1]).to(dtype)[:, None, None, None]
        x_tilde = torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps
        pred = model(z, x_tilde, torch.from_numpy(ts))
        loss = ((pred - eps) ** 2).mean()
        if not torch.isfinite(loss):
            raise RuntimeError(f"training diverged: non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = float(loss.detach())
        smoothed = val if smoothed is None else cfg.ema * smoothed + (1 - cfg.ema) * val
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": val, "smoothed_loss": smoothed})
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Reverse process
# ---------------------------------------------------------------------------

def _predictor_fn(model):
    if isinstance(model, RefinerModel):
        return model.predict
    return model


def reverse_step(model, z: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule,
                 eps_t: np.ndarray | None = None) -> np.ndarray:
    """One ancestral denoising step from x_t to x_{t-1}.

    x_{t-1} = (x_t - (1 - a_t)/sqrt(1 - abar_t) * f(z, x_t, t)) / sqrt(a_t)
              + sqrt(b_t) * eps_t
    with eps_t required to be zero at t = 1.
    """
    _check_t(t, sched)
    x_t = np.asarray(x_t, dtype=np.float64)
    pred = np.asarray(_predictor_fn(model)(z, x_t, t), dtype=np.float64)
    a = sched.alpha[t - 1]
    abar = sched.alpha_bar[t - 1]
    b = sched.beta[t - 1]
    mean = (x_t - (1.0 - a) / math.sqrt(1.0 - abar) * pred) / math.sqrt(a)
    if eps_t is None:
        return mean
    return mean + math.sqrt(b) * np.asarray(eps_t, dtype=np.float64)


def sample(model, z: np.ndarray, sched: NoiseSchedule, seed: int | list[int],
           scale: int | None = None, channels: int | None = None) -> np.ndarray:
    """Draw one refined patch by running the full reverse chain from pure noise.

    Deterministic for fixed (model, z, seed). The final state is clipped to
    [-1, 1]; intermediates are left unclipped. Raises naming the step index if
    a non-finite state appears.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        z = z[:, :, None]
    if isinstance(model, RefinerModel):
        scale = model.config.scale if scale is None else scale
        channels = model.config.channels if channels is None else channels
    if scale is None:
        raise ValueError("scale is required for a bare predictor callable")
    channels = z.shape[2] if channels is None else channels
    rng = np.random.default_rng(seed)
    shape = (z.shape[0] * scale, z.shape[1] * scale, channels)
    x = rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        eps_t = rng.standard_normal(shape) if t > 1 else None
        x = reverse_step(model, z, x, t, sched, eps_t)
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"non-finite sample state at timestep {t}")
    return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Interpolation upscaling for unrefined patches
# ---------------------------------------------------------------------------

def enlarge(patch: np.ndarray, k: int, method: str = "bilinear") -> np.ndarray:
    """Upscale a patch by integer factor k with separable interpolation.

    Output values are clipped to the input's own range (bicubic can overshoot).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if method not in _ENLARGE_INTERP:
        raise ValueError(f"unsupported method {method!r}, expected one of {sorted(_ENLARGE_INTERP)}")
    patch = np.asarray(patch)
    squeeze = patch.ndim == 2
    if squeeze:
        patch = patch[:, :, None]
    if k == 1:
        out = patch.copy()
    else:
        h, w = patch.shape[:2]
        out = cv2.resize(np.ascontiguousarray(patch), (w * k, h * k),
                         interpolation=_ENLARGE_INTERP[method])
        if out.ndim == 2:
            out = out[:, :, None]
        out = np.clip(out, patch.min(), patch.max())
    return out[:, :, 0] if squeeze else out
