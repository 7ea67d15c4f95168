"""Desk-scale post-training quantization toolkit: a small full-precision
classifier, BN-statistics-aligned synthetic data from a conditional
generator, and low-bit fine-tuning through a straight-through estimator."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .bns import (
    BnRunningStats,
    ClassCentroids,
    DistortionParams,
    PerImageBns,
    bns_loss,
    cbns_loss,
    collect_running_stats,
    dbns_loss,
    deep_layer_start,
    per_image_bns,
)
from .config import RunSettings, TrainConfig
from .generator import LossWeights, generate, generator_total_loss, predict_labels
from .network import Network, forward
from .quantizer import QuantParams, QuantPolicy, fake_quantize_ste
from .trainer import evaluate, lr_schedule, run_fdda

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad",
    "BnRunningStats", "ClassCentroids", "DistortionParams", "PerImageBns",
    "bns_loss", "cbns_loss", "dbns_loss", "collect_running_stats",
    "deep_layer_start", "per_image_bns",
    "RunSettings", "TrainConfig",
    "LossWeights", "generate", "generator_total_loss", "predict_labels",
    "Network", "forward",
    "QuantParams", "QuantPolicy", "fake_quantize_ste",
    "evaluate", "lr_schedule", "run_fdda",
    "__version__",
]
