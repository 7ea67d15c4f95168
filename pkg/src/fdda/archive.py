"""Single-file model archive: a JSON manifest followed by little-endian
float32 blobs. Parameters, BN running buffers, class centroids, and
activation quantizer bounds all round-trip bitwise."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .bns import ClassCentroids
from .network import Network, layer_from_dict, layer_to_dict
from .quantizer import QuantParams, QuantPolicy

MAGIC = b"FDA1"
FORMAT_VERSION = 1


class ArchiveError(Exception):
    """Base error for unreadable archives."""


class ArchiveCorruptError(ArchiveError):
    """Bad magic, unparsable manifest, or truncated payload."""


class ArchiveVersionError(ArchiveError):
    """Readable manifest written by an incompatible format version."""


@dataclass
class ModelArchive:
    network: Network
    centroids: ClassCentroids | None = None
    act_quant: list[QuantParams] | None = None
    policy: QuantPolicy | None = None


def _emit(arrays: list, payload: list, name: str, arr: np.ndarray, offset: int) -> int:
    data = np.ascontiguousarray(arr, dtype="<f4")
    raw = data.tobytes()
    arrays.append({
        "name": name,
        "shape": list(data.shape),
        "offset": offset,
        "nbytes": len(raw),
    })
    payload.append(raw)
    return offset + len(raw)


def save_model(path, archive: ModelArchive | Network) -> None:
    """Write an archive (a bare Network is wrapped with no extras)."""
    if isinstance(archive, Network):
        archive = ModelArchive(archive)
    net = archive.network
    arrays: list[dict] = []
    payload: list[bytes] = []
    offset = 0
    for name, p in net.params.items():
        offset = _emit(arrays, payload, f"param:{name}", p.data, offset)
    for name, b in net.buffers.items():
        offset = _emit(arrays, payload, f"buffer:{name}", b, offset)

    manifest: dict = {
        "version": FORMAT_VERSION,
        "layers": [layer_to_dict(l) for l in net.layers],
        "meta": net.meta,
        "bn_layer_count": net.bn_layer_count,
    }

    if archive.centroids is not None:
        cen = archive.centroids
        for c in sorted(cen.per_class):
            for l in cen.deep_layers():
                m, v = cen.per_class[c][l]
                offset = _emit(arrays, payload, f"centroid:{c}:{l}:mean", m, offset)
                offset = _emit(arrays, payload, f"centroid:{c}:{l}:var", v, offset)
        manifest["centroids"] = {
            "deep_start": cen.deep_start,
            "layer_count": cen.layer_count,
            "classes": sorted(cen.per_class),
        }

    if archive.act_quant is not None:
        manifest["act_quant"] = [
            {"bits": q.bits, "lower": q.lower, "upper": q.upper}
            for q in archive.act_quant
        ]
    if archive.policy is not None:
        p = archive.policy
        manifest["policy"] = {
            "default_bits": p.default_bits,
            "act_bits": p.act_bits,
            "first_layer_bits": p.first_layer_bits,
            "last_layer_bits": p.last_layer_bits,
        }

    manifest["arrays"] = arrays
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for raw in payload:
            fh.write(raw)


def load_model(path) -> ModelArchive:
    """Read an archive back; raises ArchiveCorruptError / ArchiveVersionError
    on malformed input instead of crashing."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ArchiveCorruptError(f"{path}: not a model archive")
    (mlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + mlen:
        raise ArchiveCorruptError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveCorruptError(f"{path}: unparsable manifest ({exc})") from exc
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise ArchiveVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")

    payload = raw[8 + mlen :]
    values: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise ArchiveCorruptError(f"{path}: truncated payload at {entry['name']}")
        try:
            arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(entry["shape"])
        except ValueError as exc:
            raise ArchiveCorruptError(f"{path}: bad blob for {entry['name']} ({exc})") from exc
        values[entry["name"]] = arr.copy()

    layers = [layer_from_dict(d) for d in manifest["layers"]]
    params = {name[len("param:"):]: Tensor(arr, requires_grad=True)
              for name, arr in values.items() if name.startswith("param:")}
    buffers = {name[len("buffer:"):]: arr
               for name, arr in values.items() if name.startswith("buffer:")}
    net = Network(layers, params, buffers, manifest.get("meta", {}))

    centroids = None
    if "centroids" in manifest:
        info = manifest["centroids"]
        per_class = {}
        for c in info["classes"]:
            per_class[int(c)] = {
                l: (values[f"centroid:{c}:{l}:mean"], values[f"centroid:{c}:{l}:var"])
                for l in range(info["deep_start"], info["layer_count"] + 1)
            }
        centroids = ClassCentroids(info["deep_start"], info["layer_count"], per_class)

    act_quant = None
    if "act_quant" in manifest:
        act_quant = [QuantParams(q["bits"], q["lower"], q["upper"])
                     for q in manifest["act_quant"]]
    policy = None
    if "policy" in manifest:
        policy = QuantPolicy(**manifest["policy"])

    return ModelArchive(net, centroids=centroids, act_quant=act_quant, policy=policy)
