"""Dichotomized patch refinement (DPR).

Split an image into patches, score each patch for object presence with a
hierarchical windowed-attention classifier, refine only the positive patches
with a conditional denoising diffusion model, enlarge the rest by interpolation,
reassemble, and quantify the detection-accuracy/compute tradeoff.
"""

from .data import (
    BoundingBox,
    DatasetManifest,
    ImageSample,
    PatchLabelPyramid,
    SceneConfig,
    build_pyramid_labels,
    downsample_image,
    generate_synthetic_scene,
    object_pixel_ratio,
    partition_by_ratio,
)
from .evaluation import (
    Detection,
    MetricsReport,
    evaluate_detections,
    flops_report,
    frechet_distance,
    kernel_mmd,
    psnr,
    ssim,
    toy_detector,
)
from .organizer import IndexedPatchSet, organize, partition
from .refiner import (
    NoiseSchedule,
    PatchPair,
    RefinerConfig,
    cdm_loss,
    enlarge,
    forward_noising,
    init_refiner,
    make_schedule,
    reverse_step,
    sample,
    train_refiner,
)
from .selector import (
    ScorePyramid,
    SelectionMask,
    SelectorConfig,
    aggregate_scores,
    classify_patches,
    encode,
    init_selector,
    pyramid_loss,
    select_patches,
    selection_metrics,
    threshold_mask,
    train_selector,
    window_attention,
)

__version__ = "0.1.0"
