"""Hierarchical windowed-attention patch classifier and selection utilities.

An embedding convolution turns the image into a token grid; a stack of
transformer layers (2x spatial merge, then alternating plain / half-shifted
window attention) yields features at three scales; a cross-attention head with
learnable class tokens scores every patch; the three score grids are resampled
to a common grid and max-combined, then thresholded into the selection mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageSample, PatchLabelPyramid

SCORE_EPS = 1e-7


@dataclass
class SelectorConfig:
    embed_kernel: int = 16            # kernel == stride of the embedding conv
    embed_channels: int = 96
    tl_depth: int = 2                 # attention blocks per layer, W-MSA/SW-MSA alternating
    window_size: int = 7
    num_heads: int = 3
    num_layers: int = 4               # transformer layers; the last three are classified
    in_channels: int = 3
    class_dim: int = 64               # width of the cross-attention classifier
    loss_weight_beta_neg: float = 0.01
    lr_conv: float = 1e-3             # embedding conv learning rate
    lr_attn: float = 1e-5             # attention / classifier learning rate
    tau: float = 0.5
    seed: int = 0
    use_position_bias: bool = True
    shift_windows: bool = True

    def __post_init__(self):
        if min(self.embed_kernel, self.embed_channels, self.tl_depth, self.window_size,
               self.num_heads, self.in_channels, self.class_dim) < 1:
            raise ValueError("all size fields must be positive")
        if self.num_layers not in (4, 5, 6):
            raise ValueError("num_layers must be 4, 5, or 6")
        if self.embed_channels % self.num_heads:
            raise ValueError(
                f"num_heads {self.num_heads} does not divide embed_channels {self.embed_channels}"
            )
        if not (0.0 < self.tau < 1.0):
            raise ValueError("tau must lie in (0, 1)")
        if self.lr_conv < 0 or self.lr_attn < 0 or self.loss_weight_beta_neg < 0:
            raise ValueError("rates and loss weights must be non-negative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class FeaturePyramid:
    """Per-scale patch features, fine to coarse; channels double as dims halve."""

    levels: list[np.ndarray]

    @property
    def r1(self) -> np.ndarray:
        return self.levels[0]

    @property
    def r2(self) -> np.ndarray:
        return self.levels[1]

    @property
    def r3(self) -> np.ndarray:
        return self.levels[2]


@dataclass
class ScorePyramid:
    """Per-scale positive-class probabilities, spatially matching the features."""

    levels: list[np.ndarray]

    def __post_init__(self):
        for s in self.levels:
            if s.min() < 0.0 or s.max() > 1.0:
                raise ValueError("scores must lie in [0, 1]")

    @property
    def s1(self) -> np.ndarray:
        return self.levels[0]

    @property
    def s2(self) -> np.ndarray:
        return self.levels[1]

    @property
    def s3(self) -> np.ndarray:
        return self.levels[2]


@dataclass
class SelectionMask:
    """Thresholded patch-selection grid together with the scores that made it."""

    grid: np.ndarray
    scores: np.ndarray
    tau: float

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.grid.shape != self.scores.shape:
            raise ValueError("grid and scores must share a shape")
        if not np.array_equal(self.grid, (self.scores >= self.tau).astype(np.uint8)):
            raise ValueError("grid is not scores >= tau")

    @property
    def selected_fraction(self) -> float:
        return float(self.grid.mean())


# ---------------------------------------------------------------------------
# Window attention
# ---------------------------------------------------------------------------

def _window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    b, h, wd, c = x.shape
    x = x.view(b, h // w, w, wd // w, w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, w * w, c)


def _window_reverse(windows: torch.Tensor, w: int, h: int, wd: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // w) * (wd // w))
    x = windows.view(b, h // w, wd // w, w, w, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, wd, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping square windows.

    The shifted variant cyclically rolls the grid by half a window before
    partitioning and rolls back afterwards. Grids whose sides are not multiples
    of the window are zero-padded and the padded keys are masked out.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int,
                 use_position_bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"num_heads {num_heads} does not divide channels {dim}")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.use_position_bias = use_position_bias
        if use_position_bias:
            w = window_size
            self.position_bias = nn.Parameter(torch.zeros((2 * w - 1) ** 2, num_heads))
            coords = torch.stack(torch.meshgrid(
                torch.arange(w), torch.arange(w), indexing="ij")).flatten(1)
            rel = coords[:, :, None] - coords[:, None, :]
            index = (rel[0] + w - 1) * (2 * w - 1) + (rel[1] + w - 1)
            self.register_buffer("bias_index", index, persistent=False)

    def forward(self, x: torch.Tensor, shifted: bool = False) -> torch.Tensor:
        """x: (B, H, W, C) -> same shape."""
        b, h, wd, c = x.shape
        w = self.window_size
        shift = w // 2 if shifted else 0
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        hp = math.ceil(h / w) * w
        wp = math.ceil(wd / w) * w
        pad_h, pad_w = hp - h, wp - wd
        if pad_h or pad_w:
            x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
            valid = torch.zeros(1, hp, wp, 1, dtype=torch.bool)
            valid[:, :h, :wd] = True
            key_valid = _window_partition(valid, w)[:, :, 0]          # (nW, w*w)
            key_valid = key_valid.repeat(b, 1)
        else:
            key_valid = None

        tokens = _window_partition(x, w)                               # (B*nW, w*w, C)
        n = tokens.shape[1]
        qkv = self.qkv(tokens).reshape(-1, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(c // self.num_heads)
        if self.use_position_bias:
            bias = self.position_bias[self.bias_index.reshape(-1)]
            bias = bias.reshape(n, n, self.num_heads).permute(2, 0, 1).to(attn.dtype)
            attn = attn + bias[None]
        if key_valid is not None:
            attn = attn.masked_fill(~key_valid[:, None, None, :], -1e9)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, n, c)
        out = self.proj(out)
        out = _window_reverse(out, w, hp, wp)[:, :h, :wd]
        if shift:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        return out


def window_attention(feature: np.ndarray, window: int, shifted: bool,
                     params: WindowAttention) -> np.ndarray:
    """Functional wrapper over WindowAttention for a single (H, W, C) grid."""
    if window != params.window_size:
        raise ValueError(f"params were built for window {params.window_size}, not {window}")
    if not np.all(np.isfinite(feature)):
        raise ValueError("feature contains non-finite values")
    dtype = next(params.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(feature)).to(dtype)[None]
    with torch.no_grad():
        out = params(x, shifted=shifted)
    return out[0].numpy().astype(np.float64)


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden_ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * hidden_ratio)
        self.fc2 = nn.Linear(dim * hidden_ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class _AttentionBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_size: int, shifted: bool,
                 use_position_bias: bool):
        super().__init__()
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size, use_position_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x), shifted=self.shifted)
        return x + self.mlp(self.norm2(x))


class _Merge(nn.Module):
    """2x spatial downsample by concatenating 2x2 neighborhoods, then projecting."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim)

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"feature dims {h}x{w} not divisible by 2 for merging")
        x = x.view(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, h // 2, w // 2, 4 * c)
        return self.reduce(self.norm(x))


class TransformerLayer(nn.Module):
    """Optional feature merge followed by tl_depth windowed attention blocks."""

    def __init__(self, dim: int, cfg: SelectorConfig, merge: bool):
        super().__init__()
        self.merge = _Merge(dim) if merge else None
        out_dim = 2 * dim if merge else dim
        self.blocks = nn.ModuleList(
            _AttentionBlock(
                out_dim, cfg.num_heads, cfg.window_size,
                shifted=(i % 2 == 1) and cfg.shift_windows,
                use_position_bias=cfg.use_position_bias,
            )
            for i in range(cfg.tl_depth)
        )
        self.out_dim = out_dim

    def forward(self, x):
        if self.merge is not None:
            x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class SelectorModel(nn.Module):
    """Embedding conv + transformer-layer stack + per-scale cross-attention heads.

    The first layer keeps the token grid; every later layer halves it and doubles
    the channels. The outputs of the last three layers are classified with two
    learnable class tokens (one per class) via cross-attention, a residual add of
    the projected patch feature, and a two-way MLP head.
    """

    def __init__(self, config: SelectorConfig):
        super().__init__()
        self.config = config
        c = config.embed_channels
        self.embed = nn.Conv2d(config.in_channels, c, kernel_size=config.embed_kernel,
                               stride=config.embed_kernel)
        self.layers = nn.ModuleList()
        dim = c
        for i in range(config.num_layers):
            layer = TransformerLayer(dim, config, merge=(i > 0))
            self.layers.append(layer)
            dim = layer.out_dim
        self.scale_dims = [
            c * (1 << i) for i in range(config.num_layers - 3, config.num_layers)
        ]
        d = config.class_dim
        self.class_tokens = nn.Parameter(torch.randn(2, d) * 0.02)
        self.wq = nn.ModuleList(nn.Linear(sd, d) for sd in self.scale_dims)
        self.wk = nn.ModuleList(nn.Linear(d, d) for _ in self.scale_dims)
        self.wv = nn.ModuleList(nn.Linear(d, d) for _ in self.scale_dims)
        self.heads = nn.ModuleList(
            nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 2))
            for _ in self.scale_dims
        )

    def encode_batch(self, images: torch.Tensor) -> list[torch.Tensor]:
        """(B, C, H, W) image batch -> three (B, Hi, Wi, Ci) feature grids."""
        if not torch.all(torch.isfinite(images)):
            raise ValueError("input images contain non-finite values")
        stride = self.config.embed_kernel
        if images.shape[-1] % stride or images.shape[-2] % stride:
            raise ValueError(
                f"image dims {tuple(images.shape[-2:])} not divisible by embed stride {stride}"
            )
        token_side = images.shape[-1] // stride
        need = 1 << (self.config.num_layers - 1)
        if token_side % need:
            raise ValueError(f"token grid {token_side} not divisible by {need}")
        x = self.embed(images).permute(0, 2, 3, 1)  # NHWC tokens
        outputs = []
        for layer in self.layers:
            x = layer(x)
            outputs.append(x)
        return outputs[-3:]

    def classify_batch(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        """Three feature grids -> three (B, Hi, Wi, 2) class-probability grids."""
        d = self.config.class_dim
        probs = []
        for i, r in enumerate(feats):
            q = self.wq[i](r)                                  # (B, H, W, d)
            k = self.wk[i](self.class_tokens)                  # (2, d)
            v = self.wv[i](self.class_tokens)                  # (2, d)
            attn = (q @ k.T / math.sqrt(d)).softmax(dim=-1)    # (B, H, W, 2)
            a = attn @ v                                       # (B, H, W, d)
            logits = self.heads[i](a + q)
            probs.append(logits.softmax(dim=-1))
        return probs

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.classify_batch(self.encode_batch(images))


def init_selector(config: SelectorConfig) -> SelectorModel:
    """Deterministically initialized selector; same (config, seed) -> same weights."""
    torch.manual_seed(config.seed)
    model = SelectorModel(config)
    model.eval()
    return model


def _image_tensor(image: ImageSample | np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    px = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    if px.ndim == 2:
        px = px[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(px)).permute(2, 0, 1)[None].to(dtype)


def encode(model: SelectorModel, image: ImageSample | np.ndarray) -> FeaturePyramid:
    """Feature pyramid (three scales, numpy) for one image."""
    with torch.no_grad():
        feats = model.encode_batch(_image_tensor(image, next(model.parameters()).dtype))
    return FeaturePyramid([f[0].numpy().astype(np.float64) for f in feats])


def classify_patches(model: SelectorModel, fp: FeaturePyramid) -> ScorePyramid:
    """Positive-class probability grid per scale."""
    dtype = next(model.parameters()).dtype
    feats = []
    for i, level in enumerate(fp.levels):
        if level.shape[-1] != model.scale_dims[i]:
            raise ValueError(
                f"scale {i} has {level.shape[-1]} channels, expected {model.scale_dims[i]}"
            )
        feats.append(torch.from_numpy(np.ascontiguousarray(level)).to(dtype)[None])
    with torch.no_grad():
        probs = model.classify_batch(feats)
    return ScorePyramid([p[0, :, :, 1].numpy().astype(np.float64) for p in probs])


# ---------------------------------------------------------------------------
# Loss, aggregation, thresholding
# ---------------------------------------------------------------------------

def _score_levels(scores) -> list:
    return scores.levels if isinstance(scores, ScorePyramid) else list(scores)


def _label_levels(labels) -> list:
    return labels.grids if isinstance(labels, PatchLabelPyramid) else list(labels)


def pyramid_loss(scores, labels, beta_neg: float = 0.01):
    """Scale-summed weighted cross entropy on patch scores.

    Per scale the per-patch terms -y*log(s) - beta_neg*(1-y)*log(1-s) are
    averaged over patches; scales are then summed, so the value does not grow
    with grid size. Scores are clipped to [1e-7, 1 - 1e-7] before the logs.
    Accepts numpy arrays (returns float) or torch tensors (returns a scalar
    tensor differentiable w.r.t. the scores).
    """
    score_list, label_list = _score_levels(scores), _label_levels(labels)
    if len(score_list) != len(label_list):
        raise ValueError("score and label pyramids differ in depth")
    use_torch = any(isinstance(s, torch.Tensor) for s in score_list)
    total = None
    for s, y in zip(score_list, label_list):
        if tuple(s.shape) != tuple(y.shape):
            raise ValueError(f"score shape {tuple(s.shape)} != label shape {tuple(y.shape)}")
        if use_torch:
            yt = y if isinstance(y, torch.Tensor) else torch.from_numpy(np.asarray(y))
            yt = yt.to(s.dtype)
            sc = s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
            term = -(yt * torch.log(sc) + beta_neg * (1.0 - yt) * torch.log(1.0 - sc)).mean()
        else:
            sc = np.clip(np.asarray(s, dtype=np.float64), SCORE_EPS, 1.0 - SCORE_EPS)
            ya = np.asarray(y, dtype=np.float64)
            term = float(
                -(ya * np.log(sc) + beta_neg * (1.0 - ya) * np.log(1.0 - sc)).mean()
            )
        total = term if total is None else total + term
    return total


def aggregate_scores(scores, target_grid: int = 8) -> np.ndarray:
    """Resample every scale to target_grid x target_grid (bilinear) and take the max."""
    resampled = []
    for s in _score_levels(scores):
        s = np.asarray(s, dtype=np.float64)
        if s.shape == (target_grid, target_grid):
            resampled.append(s)
        else:
            resampled.append(
                cv2.resize(s, (target_grid, target_grid), interpolation=cv2.INTER_LINEAR)
            )
    return np.maximum.reduce(resampled)


def threshold_mask(scores: np.ndarray, tau: float) -> SelectionMask:
    """Binary selection grid: scores >= tau."""
    if not (0.0 < tau < 1.0):
        raise ValueError("tau must lie in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    return SelectionMask((scores >= tau).astype(np.uint8), scores, tau)


def select_patches(
    image: ImageSample | np.ndarray, mask: SelectionMask, patch_px: int
) -> tuple[list[tuple[np.ndarray, tuple[int, int]]], list[tuple[np.ndarray, tuple[int, int]]]]:
    """Route every tile of the image by its mask bit.

    Returns (positives, negatives), each a list of (patch, (row, col)); together
    they cover the image exactly once.
    """
    px = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    if px.ndim == 2:
        px = px[:, :, None]
    g = mask.grid.shape[0]
    h, w = px.shape[:2]
    if h != g * patch_px or w != g * patch_px:
        raise ValueError(
            f"image dims {h}x{w} incompatible with grid {g} at {patch_px}px per patch"
        )
    positives, negatives = [], []
    for r in range(g):
        for c in range(g):
            tile = px[r * patch_px:(r + 1) * patch_px, c * patch_px:(c + 1) * patch_px].copy()
            (positives if mask.grid[r, c] else negatives).append((tile, (r, c)))
    return positives, negatives


# ---------------------------------------------------------------------------
# Selection quality metrics
# ---------------------------------------------------------------------------

@dataclass
class SelectionMetrics:
    tpr: float
    max_f: float
    iou: float


def _confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    return tp, fp, fn


def selection_metrics(pred: SelectionMask, gt: np.ndarray) -> SelectionMetrics:
    """Recall, best-F1-over-thresholds, and IoU of the selection grid vs truth.

    Empty denominators resolve to 1 (a trivially perfect score when there is
    nothing to find).
    """
    gt = np.asarray(gt)
    if pred.grid.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.grid.shape} vs {gt.shape}")
    tp, fp, fn = _confusion(pred.grid, gt)
    tpr = tp / (tp + fn) if (tp + fn) else 1.0
    iou = tp / (tp + fp + fn) if (tp + fp + fn) else 1.0

    max_f = 0.0
    thresholds = np.unique(pred.scores)
    sweep = np.concatenate([[0.0], thresholds, [thresholds.max() + 1.0]])
    for thr in sweep:
        tpi, fpi, fni = _confusion(pred.scores >= thr, gt)
        f1 = 2 * tpi / (2 * tpi + fpi + fni) if (2 * tpi + fpi + fni) else 1.0
        max_f = max(max_f, f1)
    return SelectionMetrics(tpr=float(tpr), max_f=float(max_f), iou=float(iou))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class SelectorTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    target_grid: int = 8
    lr_conv: float | None = None      # None -> take from the model config
    lr_attn: float | None = None


def _stack_images(samples: list[ImageSample], dtype: torch.dtype) -> torch.Tensor:
    return torch.cat([_image_tensor(s, dtype) for s in samples], dim=0)


def _stack_labels(pyramids: list[PatchLabelPyramid], level: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([p.grids[level] for p in pyramids]).astype(np.float32))


def train_selector(
    model: SelectorModel,
    train_samples: list[ImageSample],
    train_labels: list[PatchLabelPyramid],
    train_cfg: SelectorTrainConfig | None = None,
    val_samples: list[ImageSample] | None = None,
    val_labels: list[PatchLabelPyramid] | None = None,
) -> tuple[SelectorModel, list[dict]]:
    """Minimize the pyramid loss with adaptive-moment gradient descent.

    The embedding conv uses lr_conv, everything else lr_attn. History records the
    mean training loss per epoch plus validation TPR / maxF / IoU of the
    aggregated, thresholded mask against the label grid matching target_grid.
    Deterministic for a fixed seed: shuffling comes from a dedicated generator
    and batches are visited in draw order.
    """
    if not train_samples:
        raise ValueError("empty training set")
    if len(train_samples) != len(train_labels):
        raise ValueError("one label pyramid per training sample required")
    if val_samples and (not val_labels or len(val_labels) != len(val_samples)):
        raise ValueError("validation samples require matching label pyramids")
    cfg = train_cfg or SelectorTrainConfig()
    mcfg = model.config
    lr_conv = mcfg.lr_conv if cfg.lr_conv is None else cfg.lr_conv
    lr_attn = mcfg.lr_attn if cfg.lr_attn is None else cfg.lr_attn
    dtype = next(model.parameters()).dtype

    embed_params = list(model.embed.parameters())
    embed_ids = {id(p) for p in embed_params}
    attn_params = [p for p in model.parameters() if id(p) not in embed_ids]
    opt = torch.optim.Adam(
        [{"params": embed_params, "lr": lr_conv}, {"params": attn_params, "lr": lr_attn}]
    )

    rng = np.random.default_rng(cfg.seed)
    n = len(train_samples)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images = _stack_images([train_samples[i] for i in idx], dtype)
            probs = model(images)
            scores = [p[..., 1] for p in probs]
            labels = [
                _stack_labels([train_labels[i] for i in idx], lvl).to(dtype)
                for lvl in range(len(scores))
            ]
            loss = pyramid_loss(scores, labels, mcfg.loss_weight_beta_neg)
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val_samples:
            rec.update(
                _validate(model, val_samples, val_labels, cfg.target_grid, mcfg.tau,
                          cfg.batch_size)
            )
        history.append(rec)
    model.eval()
    return model, history


def _validate(model, samples, pyramids, target_grid, tau, batch_size) -> dict:
    model.eval()
    gt_level = None
    for lvl, g in enumerate(pyramids[0].grids):
        if g.shape[0] == target_grid:
            gt_level = lvl
    if gt_level is None:
        raise ValueError(f"no label grid of size {target_grid} available for validation")
    dtype = next(model.parameters()).dtype
    all_scores, all_gt = [], []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start:start + batch_size]
            probs = model(_stack_images(batch, dtype))
            for bi in range(len(batch)):
                levels = [p[bi, :, :, 1].numpy().astype(np.float64) for p in probs]
                all_scores.append(aggregate_scores(levels, target_grid))
                all_gt.append(pyramids[start + bi].grids[gt_level])
    scores = np.concatenate(all_scores, axis=0)
    gt = np.concatenate(all_gt, axis=0)
    m = selection_metrics(threshold_mask(scores, tau), gt)
    frac = float((scores >= tau).mean())
    return {"val_tpr": m.tpr, "val_maxf": m.max_f, "val_iou": m.iou,
            "val_selected_fraction": frac}


# ---------------------------------------------------------------------------
# FLOPs estimate and score export
# ---------------------------------------------------------------------------

def selector_forward_flops(config: SelectorConfig, image_size: int) -> float:
    """Rough FLOPs of one selector forward pass on an image_size input."""
    side = image_size // config.embed_kernel
    c = config.embed_channels
    total = 2.0 * config.embed_kernel ** 2 * config.in_channels * c * side * side
    dim = c
    for li in range(config.num_layers):
        if li > 0:
            total += 2.0 * (4 * dim) * (2 * dim) * (side // 2) ** 2
            dim, side = 2 * dim, side // 2
        n_tokens = side * side
        w2 = min(config.window_size, side) ** 2
        per_block = 2.0 * n_tokens * dim * (4 * dim) + 2.0 * n_tokens * w2 * dim * 2 \
            + 2.0 * n_tokens * dim * (8 * dim)
        total += config.tl_depth * per_block
    return float(total)


def save_scores_json(path: str | Path, image_id: str, mask: SelectionMask) -> None:
    """Per-image export of the aggregated scores and thresholded mask."""
    doc = {
        "id": image_id,
        "grid": int(mask.grid.shape[0]),
        "tau": mask.tau,
        "scores": [float(v) for v in mask.scores.flatten()],
        "mask": [int(v) for v in mask.grid.flatten()],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_scores_json(path: str | Path) -> tuple[str, SelectionMask]:
    doc = json.loads(Path(path).read_text())
    g = doc["grid"]
    scores = np.asarray(doc["scores"], dtype=np.float64).reshape(g, g)
    mask = SelectionMask(np.asarray(doc["mask"], dtype=np.uint8).reshape(g, g),
                         scores, doc["tau"])
    return doc["id"], mask
