"""Conditional image synthesis and the generator's composite training loss:
classification confidence plus coarse and fine-grained BN-statistics
alignment against a frozen pre-trained classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bns import (
    BnRunningStats,
    ClassCentroids,
    DistortionParams,
    batch_bns,
    bns_loss,
    cbns_loss,
    dbns_loss,
    per_class_bns_stacked,
)
from .network import Network, forward


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights of the two composite losses: the generator combines
    classification, coarse-alignment, distorted-centroid, and centroid terms;
    the quantized model combines classification with distillation."""

    ce: float = 0.5
    bns: float = 0.2
    dbns: float = 0.9
    cbns: float = 0.05
    kd: float = 20.0

    def __post_init__(self):
        for name in ("ce", "bns", "dbns", "cbns", "kd"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def sample_labels(num_classes: int, batch: int, rng: np.random.Generator,
                  stratify: bool = True) -> np.ndarray:
    """Uniform class labels; when the batch is at least one per class,
    stratified so every class appears at least once."""
    if stratify and batch >= num_classes:
        labels = np.concatenate([
            np.arange(num_classes),
            rng.integers(0, num_classes, size=batch - num_classes),
        ])
        return rng.permutation(labels).astype(np.int64)
    return rng.integers(0, num_classes, size=batch).astype(np.int64)


def generate(g: Network, labels: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Synthesize one image per label from standard-normal noise.

    The noise vector is gated by the label embedding before the dense stem;
    BN layers normalize with the current batch (running buffers untouched),
    so the output is a pure function of (parameters, labels, rng draws).
    """
    labels = np.asarray(labels)
    num_classes = g.meta["num_classes"]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    z = rng.standard_normal((len(labels), g.meta["noise_dim"])).astype(np.float32)
    emb = ad.take(g.params["embed.w"], labels)
    x = emb * Tensor(z)
    return forward(g, x, train=True, update_running=False).output


def predict_labels(f_net: Network, images: Tensor | np.ndarray) -> np.ndarray:
    """Argmax of the classifier's logits; ties resolve to the smaller index."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    with ad.no_grad():
        logits = forward(f_net, x, train=False).output
    return np.argmax(logits.data, axis=1).astype(np.int64)


def combine_generator_loss(parts: dict[str, Tensor], w: LossWeights) -> Tensor:
    """Weighted sum of the four generator terms (absent terms contribute 0)."""
    total = parts["ce"] * w.ce + parts["bns"] * w.bns
    if "dbns" in parts:
        total = total + parts["dbns"] * w.dbns
    if "cbns" in parts:
        total = total + parts["cbns"] * w.cbns
    return total


def generator_total_loss(
    images: Tensor,
    labels: np.ndarray,
    f_net: Network,
    running: BnRunningStats,
    centroids: ClassCentroids,
    w: LossWeights,
    distortion: DistortionParams,
    rng: np.random.Generator,
    use_cbns: bool = True,
    use_dbns: bool = True,
) -> tuple[Tensor, dict]:
    """One pass of the synthetic batch through the frozen classifier, scoring
    Eq-style weighted sum of classification + alignment terms.

    Classes without a centroid are skipped by the centroid terms (their count
    is reported in the parts dict); gradients reach only the generator side
    because the classifier's parameters do not require gradients.
    """
    cap = forward(f_net, images, train=False, capture_bn=True)
    parts: dict = {
        "ce": ad.softmax_cross_entropy(cap.output, labels),
        "bns": bns_loss(batch_bns(cap.bn_inputs), running),
    }

    want_centroid_terms = (use_cbns or use_dbns) and centroids.available_classes
    if want_centroid_terms:
        per_class = per_class_bns_stacked(
            cap.bn_inputs,
            labels,
            classes=sorted(centroids.available_classes),
            deep_start=centroids.deep_start,
        )
        if per_class is not None:
            if use_cbns:
                parts["cbns"] = cbns_loss(per_class, centroids)
            if use_dbns:
                parts["dbns"] = dbns_loss(per_class, centroids, distortion, rng)
    batch_classes = {int(c) for c in np.unique(labels)}
    parts["skipped_classes"] = sorted(batch_classes - set(centroids.available_classes)) \
        if (use_cbns or use_dbns) else []

    total = combine_generator_loss(
        {k: v for k, v in parts.items() if isinstance(v, Tensor)}, w
    )
    return total, parts
