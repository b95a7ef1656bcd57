"""PNG image I/O and tensor layout conversions. Images travel through the
pipeline as float32 (h, w, 3) arrays in [0, 1]; network tensors are
(n, 3, h, w)."""

from __future__ import annotations

import numpy as np
from PIL import Image

from . import ops


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=ops.DTYPE) / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def to_tensor(image: np.ndarray) -> np.ndarray:
    """(h, w, 3) image -> (1, 3, h, w) tensor."""
    return np.ascontiguousarray(image.transpose(2, 0, 1)[np.newaxis], dtype=ops.DTYPE)


def stack_tensors(images) -> np.ndarray:
    """List of (h, w, 3) images -> (n, 3, h, w) batch."""
    return np.ascontiguousarray(
        np.stack([img.transpose(2, 0, 1) for img in images]), dtype=ops.DTYPE
    )


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Replace RGB with replicated luma (ITU-R 601 weights)."""
    luma = image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
    return np.repeat(luma[..., np.newaxis], 3, axis=2).astype(ops.DTYPE)
