"""Blind motion-deblurring super-resolution: decompose a blurry LR image into
seven sharp frames and fuse forward, central and backward streams into one
sharp HR image."""

from .data_pipeline import (
    DatasetManifest,
    ToySuiteSpec,
    ToyVideoSpec,
    build_dataset,
    downsample,
    generate_toy_video,
    load_manifest,
    synthesize_blur,
)
from .evaluation import bicubic_baseline, decompose, evaluate, predict
from .losses_metrics import (
    content_mse_loss,
    psnr,
    s2d_central_loss,
    s2d_pairwise_loss,
    ssim,
    total_loss,
)
from .networks import BMDSRNet, ModelConfig, Variant, count_parameters
from .training import TrainConfig, run_ablation, train

__version__ = "0.1.0"
