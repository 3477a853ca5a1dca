"""Directory format shared by checkpoints, adapters and traces.

``manifest.json`` lists tensors (name, shape, byte offset, dtype ``f32le``)
plus free-form metadata and the SHA-256 of ``weights.bin``, which holds the
tensors as concatenated little-endian float32 in manifest order.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, CorruptFileError

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
DTYPE = "f32le"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_tensors(path, tensors: dict, meta: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    manifest = {"dtype": DTYPE, "tensors": entries, "weights_sha256": sha256_bytes(blob), **meta}
    (path / WEIGHTS).write_bytes(blob)
    (path / MANIFEST).write_text(dump_json(manifest))
    return path


def load_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, manifest)``; tensors are float32 torch tensors."""
    path = Path(path)
    if not (path / MANIFEST).is_file() or not (path / WEIGHTS).is_file():
        raise ConfigError(f"{path} is not a tensor directory (missing {MANIFEST} or {WEIGHTS})")
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path / MANIFEST}: {exc}") from exc
    blob = (path / WEIGHTS).read_bytes()
    if manifest.get("dtype") != DTYPE:
        raise CorruptFileError(f"unsupported dtype {manifest.get('dtype')!r}")
    if sha256_bytes(blob) != manifest.get("weights_sha256"):
        raise CorruptFileError(f"{path / WEIGHTS} does not match its manifest hash")
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, manifest
