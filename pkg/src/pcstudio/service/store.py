"""Content-addressed artifact store and the subject registry index."""

from __future__ import annotations

import glob
import hashlib
import json
import os
import threading
import time

MEDIA_TYPES = {
    ".png": "image/png",
    ".npy": "application/octet-stream",
    ".json": "application/json",
    ".csv": "text/csv",
    ".pcs": "application/zip",
    ".pcw": "application/zip",
    ".pcd": "application/zip",
    ".msk": "application/zip",
}


class ArtifactStore:
    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def put(self, data: bytes, ext: str) -> str:
        """Store bytes under their sha256; returns the hash."""
        if not ext.startswith("."):
            ext = "." + ext
        digest = hashlib.sha256(data).hexdigest()
        path = os.path.join(self.root, digest + ext)
        if not os.path.exists(path):
            tmp = path + ".tmp"
            with open(tmp, "wb") as f:
                f.write(data)
            os.replace(tmp, path)
        return digest

    def put_file(self, src_path: str) -> str:
        with open(src_path, "rb") as f:
            data = f.read()
        return self.put(data, os.path.splitext(src_path)[1] or ".bin")

    def resolve(self, digest: str) -> tuple[str, str] | None:
        """Returns (path, media_type) for a stored hash, or None."""
        if not digest.isalnum():
            return None
        matches = sorted(glob.glob(os.path.join(self.root, digest + ".*")))
        if not matches:
            return None
        path = matches[0]
        ext = os.path.splitext(path)[1]
        return path, MEDIA_TYPES.get(ext, "application/octet-stream")

    def read(self, digest: str) -> bytes | None:
        resolved = self.resolve(digest)
        if resolved is None:
            return None
        with open(resolved[0], "rb") as f:
            return f.read()


class SubjectRegistry:
    """Single JSON index with atomic-rename updates under one writer lock."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self._index_path = os.path.join(root, "index.json")
        self._lock = threading.Lock()

    def _load(self) -> dict:
        if not os.path.exists(self._index_path):
            return {}
        with open(self._index_path) as f:
            return json.load(f)

    def _save(self, index: dict) -> None:
        tmp = self._index_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(index, f, indent=1, sort_keys=True)
        os.replace(tmp, self._index_path)

    def put(self, subject_id: str, profile_path: str, thumbnail: str | None = None) -> dict:
        entry = {
            "subject_id": subject_id,
            "profile_path": profile_path,
            "thumbnail": thumbnail,
            "created_at": time.time(),
        }
        with self._lock:
            index = self._load()
            index[subject_id] = entry
            self._save(index)
        return entry

    def get(self, subject_id: str) -> dict | None:
        with self._lock:
            return self._load().get(subject_id)

    def list(self) -> list[dict]:
        with self._lock:
            return sorted(self._load().values(), key=lambda e: e["subject_id"])

    def delete(self, subject_id: str) -> bool:
        with self._lock:
            index = self._load()
            entry = index.pop(subject_id, None)
            if entry is None:
                return False
            self._save(index)
        path = entry.get("profile_path")
        if path and os.path.exists(path):
            os.remove(path)
        return True
