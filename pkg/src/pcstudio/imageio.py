"""Image file helpers shared by the CLI and the HTTP service.

Toy-backend images are small float arrays; `.npy` files round-trip exactly.
PNG import resizes to the backend's image resolution and maps to [0, 1];
PNG export min-max normalizes (deterministic for a given array).
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .errors import ValidationError


def decode_image_bytes(data: bytes, filename: str, image_shape: tuple[int, ...]) -> np.ndarray:
    if filename.endswith(".npy"):
        arr = np.load(io.BytesIO(data), allow_pickle=False)
        if tuple(arr.shape) != tuple(image_shape):
            raise ValidationError(f"npy image has shape {arr.shape}, backend expects {image_shape}")
        return np.asarray(arr, dtype=np.float64)
    try:
        img = Image.open(io.BytesIO(data)).convert("RGB")
    except Exception as e:
        raise ValidationError(f"could not decode image: {e}") from e
    h, w = image_shape[0], image_shape[1]
    img = img.resize((w, h), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64) / 255.0


def load_image(path: str, image_shape: tuple[int, ...]) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_image_bytes(f.read(), path, image_shape)


def to_png_bytes(image: np.ndarray) -> bytes:
    arr = np.asarray(image, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    arr8 = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if arr8.ndim == 2:
        mode = "L"
    else:
        mode = "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr8, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def save_image(image: np.ndarray, path: str) -> None:
    if path.endswith(".npy"):
        np.save(path, np.asarray(image, dtype=np.float64))
        return
    with open(path, "wb") as f:
        f.write(to_png_bytes(image))
