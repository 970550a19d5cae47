"""Binary checkpoint container with bit-exact float64 round-tripping.

Layout: 8-byte magic, uint32 format version, uint64 header length, UTF-8
JSON header (model config, optional vocabulary, parameter manifest with
shapes and byte offsets, free-form extras), then the concatenated raw
little-endian float64 parameter payloads in manifest order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor

__all__ = ["FORMAT_VERSION", "CheckpointData", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"ICUSEQCK"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    params: dict[str, np.ndarray]
    config: dict
    vocab: dict | None = None
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _payload(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    # asarray (not ascontiguousarray): the latter promotes 0-d to 1-d
    return np.asarray(arr, dtype="<f8")


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, Tensor | np.ndarray],
    config: dict,
    vocab: dict | None = None,
    extra: dict | None = None,
) -> None:
    path = Path(path)
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = _payload(params[name])
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "vocab": vocab,
        "extra": extra or {},
        "params": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> CheckpointData:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format version {version} "
                f"(expected {FORMAT_VERSION})"
            )
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        body = fh.read()
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + 8 * count
        if stop > len(body):
            raise ValueError(f"{path}: truncated payload for parameter {entry['name']}")
        arr = np.frombuffer(body[start:stop], dtype="<f8").reshape(shape)
        params[entry["name"]] = arr.astype(np.float64).copy()
    return CheckpointData(
        params=params,
        config=header["config"],
        vocab=header.get("vocab"),
        extra=header.get("extra", {}),
        format_version=version,
    )
