"""End-to-end orchestration: data generation, the two training stages, selective
inference, evaluation, and threshold sweeps.

Configuration is a flat JSON document with one optional ``include`` level; every
key has a default in DEFAULTS. Inference runs per image with failure isolation:
a broken image is logged and skipped, the run continues, and skipped ids are
listed in the report.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import checkpoint as ckpt  # noqa: E402
from . import data as D  # noqa: E402
from . import evaluation as E  # noqa: E402
from . import refiner as R  # noqa: E402
from . import selector as S  # noqa: E402
from .organizer import NEGATIVE, POSITIVE, IndexedPatch, IndexedPatchSet, organize  # noqa: E402

log = logging.getLogger(__name__)


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


DEFAULTS: dict = {
    # dataset
    "dataset_dir": "data",
    "train_count": 40,
    "val_count": 10,
    "image_size": 256,          # ground-truth high-res side
    "channels": 3,
    "scale": 4,                 # high-res side / low-res side; also the refinement factor
    "min_objects": 1,
    "max_objects": 3,
    "min_object_px": 16,
    "max_object_px": 28,
    "background_level": 0.18,
    "background_noise": 0.10,
    "target_ratio": None,       # when set, object sizes are derived from it
    "ratio_low": 0.0,           # keep generating until the sample's ratio is in band
    "ratio_high": 1.0,
    # selector (desk-scale defaults; full-scale values are larger, see README)
    "selector_embed_kernel": 2,
    "selector_embed_channels": 32,
    "selector_tl_depth": 2,
    "selector_window_size": 4,
    "selector_num_heads": 2,
    "selector_num_layers": 4,
    "selector_class_dim": 32,
    "selector_beta_neg": 0.01,
    "selector_lr_conv": 1e-3,
    "selector_lr_attn": 1e-3,
    "selector_use_position_bias": True,
    "selector_shift_windows": True,
    "selector_epochs": 25,
    "selector_batch_size": 16,
    "tau": 0.5,
    "target_grid": 8,
    # refiner / diffusion
    "refiner_base_channels": 24,
    "refiner_channel_mults": [1, 2, 4],
    "refiner_blocks_per_level": 1,
    "diffusion_steps": 200,
    "beta_start": 1e-4,
    "beta_end": 0.05,
    "refiner_train_steps": 1500,
    "refiner_lr": 2e-4,
    "refiner_batch_size": 8,
    "max_refiner_pairs": 4000,
    # inference / evaluation
    "enlarge_method": "bilinear",
    "assembly_mode": "full",
    "detector": "toy",
    "detector_threshold": 0.5,
    "detector_min_area": 4,
    "operating_confidence": 0.5,
    "feature_side": 8,
    "write_tiles": True,
    # sweep
    "sweep_taus": [0.1, 0.3, 0.5, 0.7, 0.9],
    # general
    "seed": 0,
    "out_dir": "runs/dpr",
    "cache_dir": None,            # None -> <out_dir>/score_cache; DPR_CACHE_DIR wins
    "selector_checkpoint": None,  # None -> <out_dir>/selector.npz
    "refiner_checkpoint": None,   # None -> <out_dir>/refiner.npz
}


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Resolve a run config: defaults <- optional include <- file <- overrides."""
    cfg = dict(DEFAULTS)
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        include = doc.pop("include", None)
        if include is not None:
            base_path = (path.parent / include).resolve()
            if not base_path.exists():
                raise ConfigError(f"included config not found: {base_path}")
            base = json.loads(base_path.read_text())
            if "include" in base:
                raise ConfigError("only one include level is supported")
            for key in base:
                if key not in DEFAULTS:
                    raise ConfigError(f"unknown config key in include: {key!r}")
            cfg.update(base)
    for source in (doc, overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key!r}")
            cfg[key] = value
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if cfg["image_size"] % cfg["scale"]:
        raise ConfigError("image_size must be divisible by scale")
    low_side = cfg["image_size"] // cfg["scale"]
    if low_side % cfg["target_grid"]:
        raise ConfigError("low-res side must be divisible by target_grid")
    if low_side % cfg["selector_embed_kernel"]:
        raise ConfigError("low-res side must be divisible by selector_embed_kernel")
    grids = label_grids(cfg)
    if cfg["target_grid"] not in grids:
        raise ConfigError(
            f"target_grid {cfg['target_grid']} is not one of the selector scales {grids}"
        )
    if not (0.0 < cfg["tau"] < 1.0):
        raise ConfigError("tau must lie in (0, 1)")
    if not (0.0 <= cfg["ratio_low"] < cfg["ratio_high"] <= 1.0):
        raise ConfigError("require 0 <= ratio_low < ratio_high <= 1")
    if cfg["assembly_mode"] not in ("full", "black_negatives"):
        raise ConfigError("assembly_mode must be 'full' or 'black_negatives'")
    if cfg["detector"] not in DETECTORS:
        raise ConfigError(f"unknown detector {cfg['detector']!r}; have {sorted(DETECTORS)}")
    if cfg["enlarge_method"] not in ("bilinear", "nearest", "bicubic"):
        raise ConfigError("enlarge_method must be bilinear, nearest, or bicubic")
    patch_hi = (cfg["image_size"] // cfg["target_grid"])
    depth = len(cfg["refiner_channel_mults"]) - 1
    if patch_hi % (1 << depth):
        raise ConfigError(
            f"high-res patch side {patch_hi} not divisible by 2^{depth} "
            "(refiner_channel_mults too deep)"
        )


def label_grids(cfg: dict) -> list[int]:
    """Selector score-grid sizes, fine to coarse, implied by the config."""
    token = (cfg["image_size"] // cfg["scale"]) // cfg["selector_embed_kernel"]
    layers = cfg["selector_num_layers"]
    return [token >> m for m in range(layers - 3, layers)]


def selector_config(cfg: dict) -> S.SelectorConfig:
    return S.SelectorConfig(
        embed_kernel=cfg["selector_embed_kernel"],
        embed_channels=cfg["selector_embed_channels"],
        tl_depth=cfg["selector_tl_depth"],
        window_size=cfg["selector_window_size"],
        num_heads=cfg["selector_num_heads"],
        num_layers=cfg["selector_num_layers"],
        in_channels=cfg["channels"],
        class_dim=cfg["selector_class_dim"],
        loss_weight_beta_neg=cfg["selector_beta_neg"],
        lr_conv=cfg["selector_lr_conv"],
        lr_attn=cfg["selector_lr_attn"],
        tau=cfg["tau"],
        seed=cfg["seed"],
        use_position_bias=cfg["selector_use_position_bias"],
        shift_windows=cfg["selector_shift_windows"],
    )


def refiner_config(cfg: dict) -> R.RefinerConfig:
    return R.RefinerConfig(
        scale=cfg["scale"],
        channels=cfg["channels"],
        base_channels=cfg["refiner_base_channels"],
        channel_mults=tuple(cfg["refiner_channel_mults"]),
        blocks_per_level=cfg["refiner_blocks_per_level"],
        seed=cfg["seed"],
    )


DETECTORS = {
    "toy": lambda cfg: (
        lambda image: E.toy_detector(
            image, E.ToyDetectorConfig(cfg["detector_threshold"], cfg["detector_min_area"])
        )
    ),
}


# ---------------------------------------------------------------------------
# Stage: data generation
# ---------------------------------------------------------------------------

def run_generate_data(cfg: dict) -> D.DatasetManifest:
    """Write images, annotations, manifest, and pyramid label files to disk."""
    root = Path(cfg["dataset_dir"])
    scene = D.SceneConfig(
        image_size=cfg["image_size"],
        channels=cfg["channels"],
        min_objects=cfg["min_objects"],
        max_objects=cfg["max_objects"],
        min_object_px=cfg["min_object_px"],
        max_object_px=cfg["max_object_px"],
        background_level=cfg["background_level"],
        background_noise=cfg["background_noise"],
        target_ratio=cfg["target_ratio"],
    )
    low, high = cfg["ratio_low"], cfg["ratio_high"]
    total = cfg["train_count"] + cfg["val_count"]
    samples = []
    for i in range(total):
        sample = None
        for attempt in range(64):
            cand = D.generate_synthetic_scene(scene, seed=cfg["seed"] + i * 64 + attempt)
            r = D.object_pixel_ratio(cand)
            if low <= r < high or (high == 1.0 and r == 1.0):
                sample = cand
                break
        if sample is None:
            raise RuntimeError(
                f"could not generate a sample with ratio in [{low}, {high}) for index {i}"
            )
        sample.id = f"img_{i:05d}"
        samples.append(sample)
    root.mkdir(parents=True, exist_ok=True)
    D.save_dataset(samples, root)

    entries = [
        D.ManifestEntry(s.id, D.object_pixel_ratio(s),
                        "train" if i < cfg["train_count"] else "val")
        for i, s in enumerate(samples)
    ]
    manifest = D.DatasetManifest(entries)
    D.save_manifest(manifest, root / "manifest.json")

    grids = label_grids(cfg)
    low_dims = (cfg["image_size"] // cfg["scale"],) * 2
    for s in samples:
        boxes = [b.scaled(1.0 / cfg["scale"]) for b in s.boxes]
        pyramid = D.build_pyramid_labels(boxes, low_dims, grids)
        D.save_labels(pyramid, s.id, root / "labels")
    return manifest


def _load_split(cfg: dict, split: str) -> tuple[list[D.ImageSample], list[D.ImageSample],
                                                list[D.PatchLabelPyramid]]:
    """Returns (high-res samples, low-res samples, label pyramids) for a split."""
    root = Path(cfg["dataset_dir"])
    if not (root / "manifest.json").exists():
        raise ConfigError(f"dataset manifest not found under {root}; run generate-data first")
    manifest = D.load_manifest(root / "manifest.json")
    ids = manifest.ids(split)
    high = D.load_dataset(root, ids)
    lows = [D.downsample_image(s, cfg["scale"], method="area") for s in high]
    labels = [D.load_labels(sid, root / "labels") for sid in ids]
    return high, lows, labels


# ---------------------------------------------------------------------------
# Stage: training
# ---------------------------------------------------------------------------

def _selector_path(cfg: dict) -> Path:
    return Path(cfg["selector_checkpoint"] or Path(cfg["out_dir"]) / "selector.npz")


def _refiner_path(cfg: dict) -> Path:
    return Path(cfg["refiner_checkpoint"] or Path(cfg["out_dir"]) / "refiner.npz")


def _write_history(history: list[dict], path: Path) -> None:
    if not history:
        path.write_text("")
        return
    keys = sorted({k for rec in history for k in rec})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def run_train(cfg: dict, stage: str) -> Path:
    """Train one stage and write its checkpoint plus a training-history CSV."""
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if stage == "selector":
        _, train_low, train_labels = _load_split(cfg, "train")
        _, val_low, val_labels = _load_split(cfg, "val")
        if not train_low:
            raise ConfigError("training split is empty")
        model = S.init_selector(selector_config(cfg))
        model, history = S.train_selector(
            model, train_low, train_labels,
            S.SelectorTrainConfig(
                epochs=cfg["selector_epochs"],
                batch_size=cfg["selector_batch_size"],
                seed=cfg["seed"],
                target_grid=cfg["target_grid"],
            ),
            val_samples=val_low or None,
            val_labels=val_labels or None,
        )
        path = _selector_path(cfg)
        ckpt.save_selector(model, path)
        _write_history(history, out / "selector_history.csv")
        return path

    if stage == "refiner":
        sel_path = _selector_path(cfg)
        if not sel_path.exists():
            raise ConfigError(f"selector checkpoint missing: {sel_path}; train it first")
        selector = ckpt.load_selector(sel_path)
        train_high, train_low, _ = _load_split(cfg, "train")
        pairs = collect_refiner_pairs(cfg, selector, train_high, train_low)
        if not pairs:
            raise RuntimeError("selector marked no patch positive; nothing to train on")
        sched = R.make_schedule(cfg["diffusion_steps"], cfg["beta_start"], cfg["beta_end"])
        R.save_schedule_csv(sched, out / "schedule.csv")
        model = R.init_refiner(refiner_config(cfg))
        model, history = R.train_refiner(
            model, pairs, sched,
            R.RefinerTrainConfig(
                steps=cfg["refiner_train_steps"],
                lr=cfg["refiner_lr"],
                batch_size=cfg["refiner_batch_size"],
                seed=cfg["seed"],
            ),
        )
        path = _refiner_path(cfg)
        ckpt.save_refiner(model, path)
        _write_history(history, out / "refiner_history.csv")
        return path

    raise ConfigError(f"unknown training stage {stage!r}")


def collect_refiner_pairs(cfg, selector, high_samples, low_samples) -> list[R.PatchPair]:
    """Low/high patch pairs for every cell the selector marks positive."""
    g = cfg["target_grid"]
    patch_lo = (cfg["image_size"] // cfg["scale"]) // g
    patch_hi = cfg["image_size"] // g
    pairs = []
    for high, low in zip(high_samples, low_samples):
        scores = selector_scores(selector, low, g)
        mask = S.threshold_mask(scores, cfg["tau"])
        pos_lo, _ = S.select_patches(low, mask, patch_lo)
        pos_hi, _ = S.select_patches(high, mask, patch_hi)
        for (lo_tile, idx), (hi_tile, idx2) in zip(pos_lo, pos_hi):
            assert idx == idx2
            pairs.append(R.PatchPair(
                R.to_diffusion_range(lo_tile), R.to_diffusion_range(hi_tile), cfg["scale"]
            ))
            if len(pairs) >= cfg["max_refiner_pairs"]:
                return pairs
    return pairs


def selector_scores(selector, low_sample, target_grid: int) -> np.ndarray:
    """Aggregated per-patch scores for one low-res image."""
    pyramid = S.classify_patches(selector, S.encode(selector, low_sample))
    return S.aggregate_scores(pyramid, target_grid)


# ---------------------------------------------------------------------------
# Stage: inference
# ---------------------------------------------------------------------------

def _cache_dir(cfg: dict) -> Path:
    env = os.environ.get("DPR_CACHE_DIR")
    if env:
        return Path(env)
    if cfg.get("cache_dir"):
        return Path(cfg["cache_dir"])
    return Path(cfg["out_dir"]) / "score_cache"


def _cached_scores(cfg, selector, sel_hash, low_sample, grid) -> np.ndarray:
    cache = _cache_dir(cfg)
    key = cache / f"{sel_hash[:16]}_{low_sample.id}_{grid}.json"
    if key.exists():
        doc = json.loads(key.read_text())
        return np.asarray(doc["scores"], dtype=np.float64).reshape(grid, grid)
    scores = selector_scores(selector, low_sample, grid)
    cache.mkdir(parents=True, exist_ok=True)
    key.write_text(json.dumps(
        {"id": low_sample.id, "grid": grid, "scores": [float(v) for v in scores.flatten()]},
        sort_keys=True,
    ))
    return scores


def _save_png(arr: np.ndarray, path: Path) -> None:
    u8 = np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8[:, :, 0] if u8.ndim == 3 and u8.shape[2] == 1 else u8).save(path)


@dataclass
class InferenceResult:
    report: dict
    detections: dict
    per_image: list[dict]


def run_infer(cfg: dict, split: str = "val") -> InferenceResult:
    """Select, refine/enlarge, reassemble, detect, and score one split.

    Per-image failures are logged and skipped; the report lists them. Outputs:
    assembled PNGs, refined-patch tiles, per-image score/mask JSON, detections
    JSONL, report JSON, and a per-image CSV, all under out_dir.
    """
    out = Path(cfg["out_dir"])
    for sub in ("images", "scores"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    sel_path, ref_path = _selector_path(cfg), _refiner_path(cfg)
    for p, stage in ((sel_path, "train-selector"), (ref_path, "train-refiner")):
        if not p.exists():
            raise ConfigError(f"checkpoint missing: {p}; run {stage} first")
    selector = ckpt.load_selector(sel_path)
    refiner = ckpt.load_refiner(ref_path)
    sel_hash = ckpt.checkpoint_hash(sel_path)
    sched = R.make_schedule(cfg["diffusion_steps"], cfg["beta_start"], cfg["beta_end"])
    detector = DETECTORS[cfg["detector"]](cfg)

    high_samples, low_samples, labels = _load_split(cfg, split)
    if not high_samples:
        raise ConfigError(f"split {split!r} is empty")
    g = cfg["target_grid"]
    k = cfg["scale"]
    patch_lo = low_samples[0].width // g

    order = np.argsort([s.id for s in high_samples])
    per_image, skipped = [], []
    detections: dict[str, list[E.Detection]] = {}
    gt_boxes: dict[str, list[D.BoundingBox]] = {}
    gt_masks, pred_masks = [], []
    assembled_images, reference_images = [], []
    n_selected = []

    for rank, idx in enumerate(order):
        high, low = high_samples[idx], low_samples[idx]
        try:
            scores = _cached_scores(cfg, selector, sel_hash, low, g)
            mask = S.threshold_mask(scores, cfg["tau"])
            S.save_scores_json(out / "scores" / f"{low.id}.json", low.id, mask)
            positives, negatives = S.select_patches(low, mask, patch_lo)
            tiles = []
            for tile, (r, c) in positives:
                z = R.to_diffusion_range(tile)
                xhat = R.sample(refiner, z, sched, seed=[cfg["seed"], rank, r, c])
                refined = R.from_diffusion_range(xhat)
                tiles.append(IndexedPatch(refined, r, c, POSITIVE))
                if cfg["write_tiles"]:
                    tiles_dir = out / "tiles"
                    tiles_dir.mkdir(exist_ok=True)
                    _save_png(refined, tiles_dir / f"{low.id}_r{r}_c{c}.png")
            for tile, (r, c) in negatives:
                tiles.append(IndexedPatch(R.enlarge(tile, k, cfg["enlarge_method"]), r, c,
                                          NEGATIVE))
            patch_set = IndexedPatchSet(tiles, g, patch_lo * k, low.id)
            assembled = organize(patch_set, mode=cfg["assembly_mode"])
            _save_png(assembled, out / "images" / f"{low.id}.png")

            dets = detector(assembled)
            detections[low.id] = dets
            gt_boxes[low.id] = high.boxes
            assembled_images.append(assembled)
            reference_images.append(high.pixels)
            label = labels[idx]
            matching = [gr for gr in label.grids if gr.shape[0] == g]
            if not matching:
                raise RuntimeError(
                    f"no stored label grid of size {g}; regenerate the dataset "
                    "with the current selector geometry"
                )
            gt_masks.append(matching[0])
            pred_masks.append(mask.grid)
            n_selected.append(len(positives))
            per_image.append({
                "id": low.id,
                "selected_patches": len(positives),
                "selected_fraction": mask.selected_fraction,
                "psnr": E.psnr(assembled, high.pixels),
                "ssim": E.ssim(assembled, high.pixels),
                "detections": len(dets),
            })
        except Exception as exc:  # noqa: BLE001 - per-image isolation is the contract
            log.exception("image %s failed: %s", low.id, exc)
            skipped.append({"id": low.id, "error": f"{type(exc).__name__}: {exc}"})

    if not per_image:
        raise RuntimeError("every image failed; see log for causes")

    det_metrics = E.evaluate_detections(
        detections, gt_boxes, operating_confidence=cfg["operating_confidence"]
    )
    fa = E.pixel_features(reference_images, side=cfg["feature_side"])
    fb = E.pixel_features(assembled_images, side=cfg["feature_side"])
    if len(reference_images) >= 2:
        frechet, kmmd = E.frechet_distance(fa, fb), E.kernel_mmd(fa, fb)
    else:
        log.info("fewer than 2 images; skipping feature-distribution distances")
        frechet = kmmd = float("nan")
    per_patch = sched.T * R.refiner_forward_flops(refiner_config(cfg), patch_lo)
    sel_cost = S.selector_forward_flops(selector_config(cfg), low_samples[0].width)
    acct = E.flops_report(float(np.mean(n_selected)), g * g, per_patch, sel_cost)

    pred_grid = np.concatenate(pred_masks, axis=0)
    gt_grid = np.concatenate(gt_masks, axis=0)
    tp = int(((pred_grid > 0) & (gt_grid > 0)).sum())
    fn = int(((pred_grid == 0) & (gt_grid > 0)).sum())
    ps_tpr = tp / (tp + fn) if (tp + fn) else 1.0

    finite_psnr = [r["psnr"] for r in per_image if np.isfinite(r["psnr"])]
    report = E.MetricsReport(
        psnr=float(np.mean(finite_psnr)) if finite_psnr else float("inf"),
        ssim=float(np.mean([r["ssim"] for r in per_image])),
        frechet=frechet,
        kernel_mmd=kmmd,
        map=det_metrics.map,
        map50=det_metrics.map50,
        tpr=det_metrics.tpr,
        precision=det_metrics.precision,
        flops_ratio=acct.flops_ratio,
        refined_patch_fraction=acct.selected_fraction,
        extra={
            "selection_tpr": float(ps_tpr),
            "tau": cfg["tau"],
            "images": len(per_image),
            "skipped": skipped,
        },
    ).to_dict()
    report["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")

    E.save_detections(detections, out / "detections.jsonl")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "per_image.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(per_image[0].keys()))
        writer.writeheader()
        writer.writerows(per_image)
    return InferenceResult(report=report, detections=detections, per_image=per_image)


# ---------------------------------------------------------------------------
# Stage: evaluation of stored detections
# ---------------------------------------------------------------------------

def run_evaluate(cfg: dict, detections_path: str | Path, split: str = "val") -> dict:
    """Score a detections JSONL file against the dataset's ground truth."""
    dets = E.load_detections(detections_path)
    high_samples, _, _ = _load_split(cfg, split)
    gt = {s.id: s.boxes for s in high_samples}
    metrics = E.evaluate_detections(dets, gt, operating_confidence=cfg["operating_confidence"])
    doc = {"map": metrics.map, "map50": metrics.map50, "tpr": metrics.tpr,
           "precision": metrics.precision}
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluation.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc


# ---------------------------------------------------------------------------
# Stage: threshold sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list[dict]

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r["tau"])


def run_sweep(cfg: dict, taus: list[float] | None = None, split: str = "val") -> SweepResult:
    """One inference pass per threshold, reusing cached selector scores."""
    taus = list(cfg["sweep_taus"] if taus is None else taus)
    if len(taus) < 2:
        raise ConfigError("a sweep needs at least 2 thresholds")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    shared_cache = str(_cache_dir(cfg))
    sel_path, ref_path = str(_selector_path(cfg)), str(_refiner_path(cfg))
    rows = []
    for tau in taus:
        sub = dict(cfg)
        sub["tau"] = float(tau)
        sub["out_dir"] = str(out / f"sweep_tau_{tau:g}")
        sub["cache_dir"] = shared_cache
        sub["selector_checkpoint"] = sel_path
        sub["refiner_checkpoint"] = ref_path
        result = run_infer(sub, split=split)
        rows.append({
            "tau": float(tau),
            "ps_tpr": result.report["selection_tpr"],
            "patch_fraction": result.report["refined_patch_fraction"],
            "map": result.report["map"],
            "map50": result.report["map50"],
            "precision": result.report["precision"],
            "flops_ratio": result.report["flops_ratio"],
        })
    sweep = SweepResult(rows)

    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(sweep.rows[0].keys()))
        writer.writeheader()
        writer.writerows(sweep.rows)
    _plot_sweep(sweep, out)
    return sweep


def _plot_sweep(sweep: SweepResult, out: Path) -> None:
    taus = [r["tau"] for r in sweep.rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([r["patch_fraction"] for r in sweep.rows], [r["map"] for r in sweep.rows], "o-")
    ax.set_xlabel("refined patch fraction")
    ax.set_ylabel("mAP")
    ax.set_title("accuracy vs refinement compute")
    fig.tight_layout()
    for ext in ("png", "svg"):
        fig.savefig(out / f"sweep_fraction_vs_map.{ext}")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(taus, [r["ps_tpr"] for r in sweep.rows], "o-", label="selection TPR")
    ax.plot(taus, [r["patch_fraction"] for r in sweep.rows], "s--", label="patch fraction")
    ax.set_xlabel("threshold tau")
    ax.legend()
    ax.set_title("selection operating points")
    fig.tight_layout()
    for ext in ("png", "svg"):
        fig.savefig(out / f"sweep_tpr_vs_tau.{ext}")
    plt.close(fig)
