"""Silhouette-coefficient diagnostics over per-image BN statistics, plus raw
CSV export of the underlying vectors for external plotting."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .bns import PerImageBns


@dataclass(frozen=True)
class LabeledBnsDataset:
    """Per-image BN statistics paired with class labels."""

    samples: tuple[tuple[PerImageBns, int], ...]

    def __post_init__(self):
        if self.samples:
            counts = {s.layer_count for s, _ in self.samples}
            if len(counts) != 1:
                raise ValueError("samples come from differently shaped networks")

    @property
    def layer_count(self) -> int:
        return self.samples[0][0].layer_count if self.samples else 0

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.samples], dtype=np.int64)

    def layer_matrix(self, layer: int, stat: str) -> np.ndarray:
        """Rows of per-image vectors for a 1-based layer; stat selects
        'mean' or 'variance'."""
        if not 1 <= layer <= self.layer_count:
            raise ValueError(f"layer {layer} out of range 1..{self.layer_count}")
        if stat == "mean":
            rows = [s.means[layer - 1] for s, _ in self.samples]
        elif stat == "variance":
            rows = [s.variances[layer - 1] for s, _ in self.samples]
        else:
            raise ValueError(f"stat must be 'mean' or 'variance', got {stat!r}")
        return np.stack(rows).astype(np.float64)


def silhouette_sample(v: np.ndarray, own_cluster: np.ndarray,
                      other_clusters: list[np.ndarray]) -> float:
    """Silhouette value (b - a) / max(a, b) for one vector.

    ``a`` is the mean Euclidean distance from ``v`` to the other members of
    its own cluster (``own_cluster`` includes ``v`` itself); ``b`` is the
    smallest mean distance to any other cluster. A singleton own cluster
    scores 0 by convention.
    """
    others = [np.asarray(c, dtype=np.float64) for c in other_clusters if len(c)]
    if not others:
        raise ValueError("silhouette needs at least one other non-empty cluster")
    v = np.asarray(v, dtype=np.float64)
    own = np.asarray(own_cluster, dtype=np.float64)
    if len(own) <= 1:
        return 0.0
    d_own = np.linalg.norm(own - v, axis=1)
    # v is a member: drop exactly one zero-distance entry (itself)
    self_idx = int(np.argmin(d_own))
    a = float(np.delete(d_own, self_idx).mean())
    b = min(float(np.linalg.norm(c - v, axis=1).mean()) for c in others)
    denom = max(a, b)
    if denom == 0.0:
        return 0.0
    return (b - a) / denom


def silhouette_values(vectors: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Silhouette value per row, clusters given by integer labels."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two clusters")
    diff = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    n = len(vectors)
    out = np.zeros(n)
    masks = {c: labels == c for c in classes}
    sizes = {c: int(masks[c].sum()) for c in classes}
    for i in range(n):
        c = labels[i]
        if sizes[c] <= 1:
            out[i] = 0.0
            continue
        a = dist[i, masks[c]].sum() / (sizes[c] - 1)
        b = min(dist[i, masks[o]].mean() for o in classes if o != c)
        denom = max(a, b)
        out[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return out


def mean_silhouette_per_layer(ds: LabeledBnsDataset, stat: str) -> np.ndarray:
    """Average silhouette over all samples, one value per BN layer."""
    labels = ds.labels
    if len(np.unique(labels)) < 2:
        raise ValueError("silhouette needs at least two classes")
    return np.array([
        silhouette_values(ds.layer_matrix(layer, stat), labels).mean()
        for layer in range(1, ds.layer_count + 1)
    ])


def export_bns_csv(ds: LabeledBnsDataset, layer: int, path) -> None:
    """Write one layer's raw per-image statistics as CSV.

    Header is ``label,stat,c0,c1,...``; each sample contributes a 'mean' row
    and a 'variance' row.
    """
    if ds.samples:
        channels = len(ds.samples[0][0].means[layer - 1])
        if not 1 <= layer <= ds.layer_count:
            raise ValueError(f"layer {layer} out of range 1..{ds.layer_count}")
    else:
        channels = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "stat"] + [f"c{i}" for i in range(channels)])
        for stats, label in ds.samples:
            writer.writerow([label, "mean"] + [f"{x:.6g}" for x in stats.means[layer - 1]])
            writer.writerow(
                [label, "variance"] + [f"{x:.6g}" for x in stats.variances[layer - 1]]
            )
