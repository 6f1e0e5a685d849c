"""Tensor container: a zip holding manifest.json plus raw float32 blobs.

All persisted artifacts (adaptor weights, subject profiles, direction
catalogs, mask sets) share this layout. Blobs are row-major little-endian
float32; the manifest lists one entry per tensor plus arbitrary extra
metadata under top-level keys.
"""

from __future__ import annotations

import json
import zipfile
from typing import Any

import numpy as np

from .errors import ValidationError

FORMAT_VERSION = 1


def save_container(path: str, tensors: dict[str, np.ndarray], extra: dict[str, Any] | None = None) -> None:
    """Write tensors + metadata to `path` as a zip container."""
    entries = []
    blobs = []
    for i, (name, arr) in enumerate(tensors.items()):
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        fname = f"t{i:04d}.bin"
        entries.append({"name": name, "shape": list(arr32.shape), "dtype": "f32", "file": fname})
        blobs.append((fname, arr32.tobytes()))
    manifest: dict[str, Any] = {"version": FORMAT_VERSION, "tensors": entries}
    if extra:
        manifest.update(extra)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for fname, data in blobs:
            zf.writestr(fname, data)


def load_container(path: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a container; returns (tensors as float32 arrays, extra metadata)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported container version {manifest.get('version')!r}")
        tensors: dict[str, np.ndarray] = {}
        for entry in manifest["tensors"]:
            if entry["dtype"] != "f32":
                raise ValidationError(f"unsupported dtype {entry['dtype']!r} for tensor {entry['name']!r}")
            raw = zf.read(entry["file"])
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            tensors[entry["name"]] = arr.copy()
    extra = {k: v for k, v in manifest.items() if k not in ("version", "tensors")}
    return tensors, extra
