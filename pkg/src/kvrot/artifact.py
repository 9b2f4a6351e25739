"""Versioned binary calibration artifact.

Single file: magic, version, a canonical JSON header (sorted keys, compact
separators), then raw little-endian float64 blobs in sorted-name order with
offsets recorded in the header. Canonical layout means load -> save is
byte-identical, which is what makes artifacts diffable and cacheable by hash.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .layout import HeadLayout
from .rotation import RotationSpec, Targets
from .vq import Codebook, CodebookKind

_MAGIC = b"KVCA"
_VERSION = 1


@dataclass(frozen=True)
class CalibrationArtifact:
    """Everything a serving process needs to reproduce a calibrated setup."""

    layout: HeadLayout
    alpha: float
    seed: int
    rotations: dict[int, RotationSpec] = field(default_factory=dict)
    codebooks: dict[str, Codebook] = field(default_factory=dict)


def save_artifact(art: CalibrationArtifact, path: str) -> None:
    blobs: dict[str, np.ndarray] = {}
    rot_meta = {}
    for layer in sorted(art.rotations):
        spec = art.rotations[layer]
        entry: dict = {
            "order": spec.order,
            "targets": spec.targets.value,
            "learned_values": spec.learned_values,
            "signs": None,
            "learned": None,
        }
        if spec.signs is not None:
            name = f"rot/{layer}/signs"
            blobs[name] = np.ascontiguousarray(spec.signs, dtype="<f8")
            entry["signs"] = name
        if spec.learned is not None:
            name = f"rot/{layer}/learned"
            blobs[name] = np.ascontiguousarray(spec.learned, dtype="<f8")
            entry["learned"] = name
        rot_meta[str(layer)] = entry
    book_meta = {}
    for kind in sorted(art.codebooks):
        name = f"codebook/{kind}"
        blobs[name] = np.ascontiguousarray(art.codebooks[kind].centroids, dtype="<f8")
        book_meta[kind] = {"centroids": name}

    offset = 0
    blob_meta = {}
    for name in sorted(blobs):
        arr = blobs[name]
        blob_meta[name] = {"offset": offset, "shape": list(arr.shape), "dtype": "<f8"}
        offset += arr.nbytes

    header = {
        "version": _VERSION,
        "alpha": art.alpha,
        "seed": art.seed,
        "layout": {
            "num_q_heads": art.layout.num_q_heads,
            "num_kv_heads": art.layout.num_kv_heads,
            "head_dim": art.layout.head_dim,
            "rot_order": art.layout.rot_order,
            "page_tokens": art.layout.page_tokens,
        },
        "rotations": rot_meta,
        "codebooks": book_meta,
        "blobs": blob_meta,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(hjson)))
        f.write(hjson)
        for name in sorted(blobs):
            f.write(blobs[name].tobytes())


def load_artifact(path: str) -> CalibrationArtifact:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path} is not a calibration artifact")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise ConfigError(f"unsupported artifact version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    base = 12 + hlen

    def blob(name: Optional[str]) -> Optional[np.ndarray]:
        if name is None:
            return None
        meta = header["blobs"][name]
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = base + meta["offset"]
        arr = np.frombuffer(raw, dtype=meta["dtype"], count=count, offset=start)
        return arr.reshape(meta["shape"]).astype(np.float64)

    lay = header["layout"]
    layout = HeadLayout(
        num_q_heads=lay["num_q_heads"],
        num_kv_heads=lay["num_kv_heads"],
        head_dim=lay["head_dim"],
        rot_order=lay["rot_order"],
        page_tokens=lay["page_tokens"],
    )
    rotations = {}
    for layer_str, entry in header["rotations"].items():
        rotations[int(layer_str)] = RotationSpec(
            order=entry["order"],
            signs=blob(entry["signs"]),
            learned=blob(entry["learned"]),
            targets=Targets(entry["targets"]),
            learned_values=entry["learned_values"],
        )
    codebooks = {}
    for kind, entry in header["codebooks"].items():
        codebooks[kind] = Codebook(centroids=blob(entry["centroids"]), kind=CodebookKind(kind))
    return CalibrationArtifact(
        layout=layout,
        alpha=header["alpha"],
        seed=header["seed"],
        rotations=rotations,
        codebooks=codebooks,
    )
