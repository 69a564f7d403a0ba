"""Rasterizer backend selection.

The compiled kernel is used when importable; ``CONCEPTSPLAT_BACKEND=python``
forces the numpy fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _raster_py

try:
    from . import _raster_ext
except ImportError:  # extension not built
    _raster_ext = None

_forced = os.environ.get("CONCEPTSPLAT_BACKEND", "").lower()
if _forced not in ("", "python", "compiled"):
    raise ImportError(f"CONCEPTSPLAT_BACKEND must be 'python' or 'compiled', got {_forced!r}")
if _forced == "compiled" and _raster_ext is None:
    raise ImportError("CONCEPTSPLAT_BACKEND=compiled but the extension is not built")

_active = "python" if (_forced == "python" or _raster_ext is None) else "compiled"


def available() -> list[str]:
    return ["python"] + (["compiled"] if _raster_ext is not None else [])


def active() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in available():
        raise ValueError(f"backend {name!r} unavailable; have {available()}")
    _active = name


def tile_lists(rects: np.ndarray, h: int, w: int, tile: int):
    """CSR tile -> splat index lists, preserving the (depth) order of ``rects``."""
    n_tx = (w + tile - 1) // tile
    n_ty = (h + tile - 1) // tile
    n = len(rects)
    if n == 0:
        return np.zeros(n_tx * n_ty + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    nx = rects[:, 2] - rects[:, 0] + 1
    ny = rects[:, 3] - rects[:, 1] + 1
    counts = nx * ny
    owner = np.repeat(np.arange(n), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = rects[owner, 0] + local % nx[owner]
    ty = rects[owner, 1] + local // nx[owner]
    tid = ty * n_tx + tx
    order = np.argsort(tid, kind="stable")
    ids = owner[order].astype(np.int64)
    offsets = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tid, minlength=n_tx * n_ty), out=offsets[1:])
    return offsets, ids


def forward(proj, h, w, k, bg, tile, backend=None):
    backend = backend or _active
    bg = np.ascontiguousarray(bg, dtype=np.float64)
    if backend == "compiled":
        offsets, ids = tile_lists(proj.rects, h, w, tile)
        return _raster_ext.rasterize_forward(
            proj.means, proj.conics, proj.opacity, proj.colors,
            np.ascontiguousarray(proj.labels, dtype=np.int64), offsets, ids, h, w, k, bg, tile)
    return _raster_py.rasterize_forward(proj.means, proj.conics, proj.opacity, proj.colors,
                                        proj.labels, proj.rects, h, w, k, bg, tile)


def backward(proj, h, w, bg, tile, grad_color, backend=None):
    backend = backend or _active
    bg = np.ascontiguousarray(bg, dtype=np.float64)
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    if backend == "compiled":
        offsets, ids = tile_lists(proj.rects, h, w, tile)
        return _raster_ext.rasterize_backward(
            proj.means, proj.conics, proj.opacity, proj.colors, offsets, ids,
            h, w, bg, tile, grad_color)
    return _raster_py.rasterize_backward(proj.means, proj.conics, proj.opacity, proj.colors,
                                         proj.labels, proj.rects, h, w, bg, tile, grad_color)
