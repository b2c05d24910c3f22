"""diffspot: joint detection and localization of diffusion-generated image content.

A frozen semantic vision/text encoder pair is coupled with a tunable spatial
encoder through learnable class prompts and attention-based fusion blocks;
a multi-scale decoder and a text-guided head produce per-pixel fake logits
alongside the image-level fake probability.
"""

__version__ = "0.1.0"

from .data import (
    AugmentationConfig,
    ImageSample,
    Manifest,
    ManifestEntry,
    augment,
    load_manifest,
    load_sample,
    make_fixtures,
    save_manifest,
)
from .encoders import EncoderSpec, LayerFeatures, TextEncoder, VisionEncoder, load_pretrained
from .engine import (
    ModelState,
    PredictionResult,
    SpmModel,
    TrainConfig,
    build_model,
    frozen_digest,
    init_state,
    load_state,
    predict,
    save_state,
    train,
)
from .evaluation import MetricReport, evaluate, image_metrics, pixel_metrics
from .objective import LossConfig, combined_loss, detection_loss, edge_weight_map
from .robustness import DegradationSpec, degrade, sweep
from .spm import CrossAttention, FusionPlan, PromptBank, TvcaHead, VcaBlock, VsaBlock, run_fusion_plan

__all__ = [
    "AugmentationConfig",
    "CrossAttention",
    "DegradationSpec",
    "EncoderSpec",
    "FusionPlan",
    "ImageSample",
    "LayerFeatures",
    "LossConfig",
    "Manifest",
    "ManifestEntry",
    "MetricReport",
    "ModelState",
    "PredictionResult",
    "PromptBank",
    "SpmModel",
    "TextEncoder",
    "TrainConfig",
    "TvcaHead",
    "VcaBlock",
    "VisionEncoder",
    "VsaBlock",
    "augment",
    "build_model",
    "combined_loss",
    "degrade",
    "detection_loss",
    "edge_weight_map",
    "evaluate",
    "frozen_digest",
    "image_metrics",
    "init_state",
    "load_manifest",
    "load_pretrained",
    "load_sample",
    "load_state",
    "make_fixtures",
    "pixel_metrics",
    "predict",
    "run_fusion_plan",
    "save_manifest",
    "save_state",
    "sweep",
    "train",
]
