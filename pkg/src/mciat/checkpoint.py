"""Checkpoints: a JSON manifest plus one little-endian float32 blob.

The manifest records a hash of the configuration, the training step, free
metadata, and for every stored array its name, shape, byte offset and byte
length inside ``weights.bin``. Arrays are written in manifest order with no
padding, so a load followed by a save reproduces both files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "weights.bin"
FORMAT = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatchWarning(UserWarning):
    pass


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def _entries(arrays: dict[str, np.ndarray], offset: int, kind: str):
    entries, chunks = [], []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(np.shape(arr)), "offset": offset, "length": len(data)})
        chunks.append(data)
        offset += len(data)
    return entries, chunks, offset


def save_checkpoint(directory, ckpt: Checkpoint) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p_entries, p_chunks, offset = _entries(ckpt.params, 0, "param")
    b_entries, b_chunks, offset = _entries(ckpt.buffers, offset, "buffer")
    manifest = {
        "format": FORMAT,
        "config_hash": ckpt.config_hash,
        "config": ckpt.config,
        "step": int(ckpt.step),
        "meta": ckpt.meta,
        "entries": p_entries,
        "buffers": b_entries,
        "blob_length": offset,
    }
    (directory / BLOB).write_bytes(b"".join(p_chunks + b_chunks))
    (directory / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return directory


def _read(blob: bytes, entry: dict) -> np.ndarray:
    name, off, length = entry["name"], entry["offset"], entry["length"]
    count = int(np.prod(entry["shape"])) if entry["shape"] else 1
    if length != 4 * count:
        raise CheckpointError(f"entry {name!r}: length {length} bytes does not fit shape {entry['shape']}")
    if off < 0 or off + length > len(blob):
        raise CheckpointError(f"entry {name!r}: bytes {off}..{off + length} lie outside the {len(blob)}-byte blob")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(entry["shape"]).astype(np.float32)


def load_checkpoint(directory, expected_config: dict | None = None) -> Checkpoint:
    directory = Path(directory)
    mpath, bpath = directory / MANIFEST, directory / BLOB
    if not mpath.exists() or not bpath.exists():
        raise FileNotFoundError(f"no checkpoint at {directory} (need {MANIFEST} and {BLOB})")
    manifest = json.loads(mpath.read_text())
    blob = bpath.read_bytes()
    expected_len = manifest.get("blob_length")
    entries = manifest["entries"] + manifest.get("buffers", [])
    for e in entries:
        _read(blob, e)
    if expected_len is not None and len(blob) != expected_len:
        last = max(entries, key=lambda e: e["offset"])["name"] if entries else "<none>"
        raise CheckpointError(
            f"blob is {len(blob)} bytes but the manifest expects {expected_len} (last entry {last!r})"
        )
    if expected_config is not None and config_hash(expected_config) != manifest["config_hash"]:
        warnings.warn(
            f"checkpoint {directory} was written with a different configuration", ConfigMismatchWarning, stacklevel=2
        )
    return Checkpoint(
        params={e["name"]: _read(blob, e) for e in manifest["entries"]},
        buffers={e["name"]: _read(blob, e) for e in manifest.get("buffers", [])},
        config=manifest["config"],
        step=manifest["step"],
        meta=manifest["meta"],
    )
