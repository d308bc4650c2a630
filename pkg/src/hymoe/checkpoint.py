"""Checkpoint container: JSON header + manifest + raw little-endian f64 payload.

Layout on disk::

    bytes 0..7    magic b"HYMOECK1"
    bytes 8..15   header length (uint64, little-endian)
    header        UTF-8 JSON: kind, config blocks, meta, manifest
    payload       concatenated tensor data, float64 little-endian

Manifest entries carry {name, shape, offset, trainable}; offsets are relative
to the start of the payload. Dense and hybrid checkpoints share the format,
hybrid ones simply carry the extra parameter names and config blocks.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dense import DenseCheckpoint, DenseConfig
from .tensor import Parameter

MAGIC = b"HYMOECK1"


def _manifest(params: dict[str, Parameter]) -> tuple[list[dict], bytes]:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        p = params[name]
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(p.data.shape),
                "offset": offset,
                "trainable": p.trainable,
            }
        )
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def _write(path: str | Path, header: dict, payload: bytes) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read(path: str | Path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    return header, payload


def _load_params(header: dict, payload: bytes) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        data = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        params[entry["name"]] = Parameter(
            entry["name"], data.reshape(shape).astype(np.float64), trainable=entry["trainable"]
        )
    return params


def save_dense(ckpt: DenseCheckpoint, path: str | Path) -> None:
    manifest, payload = _manifest(ckpt.params)
    header = {
        "kind": "dense",
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta,
        "manifest": manifest,
    }
    _write(path, header, payload)


def save_hybrid(ckpt, path: str | Path) -> None:
    manifest, payload = _manifest(ckpt.params)
    header = {
        "kind": "hybrid",
        "config": ckpt.config.to_dict(),
        "token_moe": ckpt.token_moe.to_dict(),
        "segment_moe": ckpt.segment_moe.to_dict(),
        "meta": ckpt.meta,
        "manifest": manifest,
    }
    _write(path, header, payload)


def load(path: str | Path):
    """Load either checkpoint kind; returns DenseCheckpoint or HybridCheckpoint."""
    header, payload = _read(path)
    params = _load_params(header, payload)
    config = DenseConfig(**header["config"])
    if header["kind"] == "dense":
        return DenseCheckpoint(config=config, params=params, meta=header.get("meta", {}))
    if header["kind"] == "hybrid":
        from .hybrid import HybridCheckpoint
        from .segment_moe import SegmentMoEConfig
        from .token_moe import TokenMoEConfig

        return HybridCheckpoint(
            config=config,
            token_moe=TokenMoEConfig(**header["token_moe"]),
            segment_moe=SegmentMoEConfig(**header["segment_moe"]),
            params=params,
            meta=header.get("meta", {}),
        )
    raise ValueError(f"{path}: unknown checkpoint kind {header['kind']!r}")


def save(ckpt, path: str | Path) -> None:
    from .hybrid import HybridCheckpoint

    if isinstance(ckpt, HybridCheckpoint):
        save_hybrid(ckpt, path)
    elif isinstance(ckpt, DenseCheckpoint):
        save_dense(ckpt, path)
    else:
        raise TypeError(f"cannot save object of type {type(ckpt).__name__}")
