"""Image-quality metrics, feature-distribution distances, detection scoring, and
compute accounting.

Distribution distances operate on caller-supplied feature vectors; no pretrained
feature extractor is bundled. Detection evaluation is COCO-flavored: greedy
confidence-descending matching, 101-point interpolated AP, IoU grid 0.50:0.05:0.95.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import scipy.linalg
import scipy.ndimage
from skimage.metrics import structural_similarity

from .data import BoundingBox

log = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


@dataclass
class Detection:
    """One scored detection; class defaults to the box's own class id."""

    box: BoundingBox
    confidence: float
    class_id: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_id is None:
            self.class_id = self.box.class_id


#: per-image scored detections keyed by image id
DetectionSet = dict[str, list[Detection]]

#: N x D matrix of caller-supplied feature vectors
FeatureSet = np.ndarray


@dataclass
class DetectionMetrics:
    map: float
    map50: float
    tpr: float
    precision: float


@dataclass
class MetricsReport:
    """Aggregate report for one inference run."""

    psnr: float = float("nan")
    ssim: float = float("nan")
    frechet: float = float("nan")
    kernel_mmd: float = float("nan")
    map: float = float("nan")
    map50: float = float("nan")
    tpr: float = float("nan")
    precision: float = float("nan")
    flops_ratio: float = float("nan")
    refined_patch_fraction: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            k: getattr(self, k)
            for k in ("psnr", "ssim", "frechet", "kernel_mmd", "map", "map50",
                      "tpr", "precision", "flops_ratio", "refined_patch_fraction")
        }
        doc.update(self.extra)
        return doc


# ---------------------------------------------------------------------------
# Pixel similarity
# ---------------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_val ** 2 / mse))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7, data_range: float = 1.0,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM with Gaussian window weighting."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(f"image {a.shape} smaller than window {window}")
    channel_axis = 2 if a.ndim == 3 else None
    return float(
        structural_similarity(
            a, b,
            win_size=window,
            data_range=data_range,
            channel_axis=channel_axis,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=k1,
            K2=k2,
        )
    )


# ---------------------------------------------------------------------------
# Feature-distribution distances
# ---------------------------------------------------------------------------

def _check_features(fa: np.ndarray, fb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError("feature sets must be 2-D with a common feature dimension")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors per set")
    if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(fb))):
        raise ValueError("features contain non-finite values")
    return fa, fb


def frechet_distance(fa: np.ndarray, fb: np.ndarray) -> float:
    """Fréchet distance between Gaussians fitted to the two feature sets."""
    fa, fb = _check_features(fa, fb)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # sqrtm's internal error estimate
        covmean, errest = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
        if not (np.all(np.isfinite(covmean)) and np.isfinite(errest)):
            eps = 1e-6 * np.eye(cov_a.shape[0])
            warnings.warn("covariance square root failed; regularizing with 1e-6*I")
            covmean, _ = scipy.linalg.sqrtm((cov_a + eps) @ (cov_b + eps), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real

    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))


def kernel_mmd(fa: np.ndarray, fb: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel (x.y/D + 1)^3."""
    fa, fb = _check_features(fa, fb)
    d = fa.shape[1]
    m, n = fa.shape[0], fb.shape[0]

    def k(x, y):
        return (x @ y.T / d + 1.0) ** 3

    kxx = k(fa, fa)
    kyy = k(fb, fb)
    kxy = k(fa, fb)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def pixel_features(images: list[np.ndarray], side: int = 8) -> np.ndarray:
    """Cheap feature extractor for smoke tests: grayscale thumbnails, flattened."""
    feats = []
    for img in images:
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr.mean(axis=2)
        feats.append(cv2.resize(arr, (side, side), interpolation=cv2.INTER_AREA).flatten())
    return np.stack(feats).astype(np.float64)


# ---------------------------------------------------------------------------
# Detection evaluation
# ---------------------------------------------------------------------------

def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min)
    area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min)
    return inter / (area_a + area_b - inter)


def _match_image(dets: list[Detection], gts: list[BoundingBox], iou_thr: float) -> list[bool]:
    """Greedy confidence-descending matching; returns a TP flag per detection.

    Detections must already be sorted by descending confidence. A ground-truth
    box matches at most once; duplicates count as false positives.
    """
    taken = [False] * len(gts)
    flags = []
    for det in dets:
        best, best_iou = -1, iou_thr
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = box_iou(det.box, gt)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from confidence-ordered TP flags."""
    if n_gt == 0:
        return 1.0 if len(tp_flags) == 0 else 0.0
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def evaluate_detections(
    pred: dict[str, list[Detection]],
    gt: dict[str, list[BoundingBox]],
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS,
    operating_confidence: float = 0.5,
) -> DetectionMetrics:
    """Score predictions against ground truth.

    mAP averages 101-point AP over classes then IoU thresholds; mAP50 uses the
    0.5 threshold alone. TPR and precision are pooled over classes at IoU 0.5
    for detections with confidence >= ``operating_confidence``. Classes with no
    ground truth score AP 1 when unpredicted and 0 otherwise (logged).
    """
    image_ids = sorted(set(gt) | set(pred))
    classes = sorted(
        {b.class_id for boxes in gt.values() for b in boxes}
        | {d.class_id for dets in pred.values() for d in dets}
    )
    if not classes:
        log.info("no ground truth and no predictions; defining mAP = 1.0")
        return DetectionMetrics(map=1.0, map50=1.0, tpr=1.0, precision=1.0)

    # (class, threshold) -> AP over the whole image set
    ap_table = np.zeros((len(classes), len(iou_thresholds)))
    for ci, cls in enumerate(classes):
        per_image_dets = {
            img: sorted(
                (d for d in pred.get(img, []) if d.class_id == cls),
                key=lambda d: -d.confidence,
            )
            for img in image_ids
        }
        per_image_gts = {
            img: [b for b in gt.get(img, []) if b.class_id == cls] for img in image_ids
        }
        n_gt = sum(len(v) for v in per_image_gts.values())
        if n_gt == 0:
            n_pred = sum(len(v) for v in per_image_dets.values())
            ap = 1.0 if n_pred == 0 else 0.0
            log.info("class %s has no ground truth (%d predictions): AP := %.1f",
                     cls, n_pred, ap)
            ap_table[ci, :] = ap
            continue
        for ti, thr in enumerate(iou_thresholds):
            scored = []
            for img in image_ids:
                flags = _match_image(per_image_dets[img], per_image_gts[img], thr)
                scored.extend(
                    (d.confidence, bool(f)) for d, f in zip(per_image_dets[img], flags)
                )
            scored.sort(key=lambda t: -t[0])
            tp_flags = np.array([f for _, f in scored], dtype=bool)
            ap_table[ci, ti] = _average_precision(tp_flags, n_gt)

    map_all = float(ap_table.mean())
    map50 = float(ap_table[:, list(iou_thresholds).index(0.5)].mean()) if 0.5 in iou_thresholds \
        else float(ap_table[:, 0].mean())

    # Operating point: pooled TP/FP/FN at IoU 0.5, confidence >= threshold.
    tp = fp = n_gt_total = 0
    for img in image_ids:
        gts = gt.get(img, [])
        n_gt_total += len(gts)
        for cls in classes:
            dets = sorted(
                (d for d in pred.get(img, [])
                 if d.class_id == cls and d.confidence >= operating_confidence),
                key=lambda d: -d.confidence,
            )
            flags = _match_image(dets, [b for b in gts if b.class_id == cls], 0.5)
            tp += sum(flags)
            fp += len(flags) - sum(flags)
    tpr = tp / n_gt_total if n_gt_total else 1.0
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    return DetectionMetrics(map=map_all, map50=map50, tpr=float(tpr), precision=float(precision))


# ---------------------------------------------------------------------------
# Reference detector for the synthetic domain
# ---------------------------------------------------------------------------

@dataclass
class ToyDetectorConfig:
    threshold: float = 0.5
    min_area: int = 4


def toy_detector(image: np.ndarray, config: ToyDetectorConfig | None = None) -> list[Detection]:
    """Threshold + connected components tuned to the synthetic scenes.

    Bright blobs become detections; confidence is the blob's mean intensity and
    the class is rectangle (0) vs disc (1) by bounding-box fill ratio.
    """
    config = config or ToyDetectorConfig()
    arr = np.asarray(image, dtype=np.float64)
    gray = arr.mean(axis=2) if arr.ndim == 3 else arr
    binary = gray >= config.threshold
    labeled, n = scipy.ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    dets = []
    for i, sl in enumerate(scipy.ndimage.find_objects(labeled, n)):
        if sl is None:
            continue
        component = labeled[sl] == (i + 1)
        area = int(component.sum())
        if area < config.min_area:
            continue
        y0, y1 = sl[0].start, sl[0].stop
        x0, x1 = sl[1].start, sl[1].stop
        fill = area / ((y1 - y0) * (x1 - x0))
        cls = 0 if fill >= 0.85 else 1
        conf = float(np.clip(gray[sl][component].mean(), 0.0, 1.0))
        dets.append(Detection(BoundingBox(x0, y0, x1, y1, class_id=cls), conf))
    return dets


# ---------------------------------------------------------------------------
# Compute accounting
# ---------------------------------------------------------------------------

@dataclass
class FlopsAccounting:
    flops_ratio: float
    selected_fraction: float
    refined_flops: float
    baseline_flops: float


def flops_report(selected: float, total: int, per_patch_cost: float,
                 selector_cost: float = 0.0) -> FlopsAccounting:
    """Refinement compute spent relative to refining every patch.

    ``selected`` may be fractional (an average over images). The ratio charges
    the selector's own cost to the selective pipeline.
    """
    if total <= 0:
        raise ValueError("total patch count must be positive")
    if selected < 0 or per_patch_cost < 0 or selector_cost < 0:
        raise ValueError("counts and costs must be non-negative")
    baseline = total * per_patch_cost
    refined = selected * per_patch_cost + selector_cost
    ratio = refined / baseline if baseline > 0 else float("nan")
    return FlopsAccounting(
        flops_ratio=float(ratio),
        selected_fraction=float(selected / total),
        refined_flops=float(refined),
        baseline_flops=float(baseline),
    )


# ---------------------------------------------------------------------------
# Detections interchange: JSON lines of (image_id, box, class_id, confidence)
# ---------------------------------------------------------------------------

def save_detections(dets: dict[str, list[Detection]], path: str | Path) -> None:
    with open(path, "w") as fh:
        for image_id in sorted(dets):
            for d in dets[image_id]:
                rec = {
                    "image_id": image_id,
                    "box": [d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max],
                    "class_id": d.class_id,
                    "confidence": d.confidence,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_detections(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            box = BoundingBox(*map(float, rec["box"]), class_id=int(rec["class_id"]))
            out.setdefault(rec["image_id"], []).append(
                Detection(box, float(rec["confidence"]), int(rec["class_id"]))
            )
    return out
