"""Checkpoint files: a JSON manifest plus a flat little-endian f64 blob.

``model.ckpt`` (manifest) sits next to ``model.ckpt.bin`` (blob). The
manifest lists every parameter with its shape and byte offset.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import ParameterStore

FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def blob_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".bin")


def save_checkpoint(path, store: ParameterStore, seed: int, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(store.names()):
        arr = np.ascontiguousarray(store.value(name), dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = blob_path(path)
    blob.write_bytes(b"".join(chunks))
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "blob": blob.name,
        "parameters": entries,
        "meta": meta or {},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    """Returns the restored store and the full manifest."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    blob = path.with_name(manifest["blob"])
    if not blob.is_file():
        raise CheckpointError(f"checkpoint blob not found: {blob}")
    raw = blob.read_bytes()
    store = ParameterStore(seed=manifest["seed"])
    for e in manifest["parameters"]:
        if e["dtype"] != "f64":
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']} for {e['name']}")
        chunk = raw[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{blob}: truncated data for {e['name']}")
        store.set(e["name"], np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]))
    return store, manifest
