"""Image and array dumps."""
from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    """Float RGB in [0, 1], or a boolean / float mask, as an 8-bit PNG."""
    arr = np.asarray(img)
    if arr.dtype == bool:
        arr = arr.astype(np.float64)
    Image.fromarray(to_uint8(arr)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def save_npy(path, arr: np.ndarray) -> None:
    np.save(path, np.asarray(arr, dtype=np.float64), allow_pickle=False)
