"""Coarse per-concept point clouds: generation, selection, normalization, placement."""
from __future__ import annotations

import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .camera import Camera, orbit_camera
from .layout import PlacementTransform
from .ply import PlyError, read_ply, write_ply

log = logging.getLogger(__name__)

MIN_POINTS = 64
PROVENANCES = ("procedural", "external", "file")


class PointCloudError(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3)
    colors: np.ndarray     # (N, 3) in [0, 1]
    provenance: str = "procedural"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise PointCloudError("positions and colors differ in length")
        if len(self.positions) < MIN_POINTS:
            raise PointCloudError(f"point cloud needs at least {MIN_POINTS} points, got {len(self.positions)}")
        if not np.all(np.isfinite(self.positions)):
            raise PointCloudError("non-finite point positions")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise PointCloudError("colors must lie in [0, 1]")
        if self.provenance not in PROVENANCES:
            raise PointCloudError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.positions)


# --------------------------------------------------------------------------- generators

PRIMITIVE_KEYWORDS = {
    "sphere": ("sphere", "ball", "orb", "globe", "planet", "apple", "orange"),
    "box": ("box", "cube", "crate", "block", "chest", "brick", "dice"),
    "cylinder": ("cylinder", "can", "barrel", "pillar", "cup", "mug", "vase", "bottle", "tower"),
    "figure": ("figure", "person", "man", "woman", "child", "boy", "girl", "doll", "robot",
               "dog", "cat", "bear", "toy", "statue"),
}

COLOR_KEYWORDS = {
    "red": (0.8, 0.2, 0.2), "green": (0.25, 0.7, 0.3), "blue": (0.2, 0.35, 0.85),
    "yellow": (0.9, 0.8, 0.2), "orange": (0.9, 0.5, 0.15), "purple": (0.55, 0.3, 0.7),
    "white": (0.92, 0.92, 0.92), "black": (0.1, 0.1, 0.1), "brown": (0.5, 0.33, 0.2),
    "gray": (0.5, 0.5, 0.5), "grey": (0.5, 0.5, 0.5), "wooden": (0.6, 0.42, 0.25),
}

DEFAULT_COLORS = {"sphere": (0.7, 0.55, 0.45), "box": (0.6, 0.45, 0.3),
                  "cylinder": (0.55, 0.6, 0.65), "figure": (0.75, 0.65, 0.55)}


def _words(prompt: str) -> list[str]:
    return "".join(ch if ch.isalnum() else " " for ch in prompt.lower()).split()


def match_primitive(prompt: str) -> str | None:
    words = _words(prompt)
    for w in words:
        for prim, keys in PRIMITIVE_KEYWORDS.items():
            if w in keys or (w.endswith("s") and w[:-1] in keys):
                return prim
    return None


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n, radius=0.5):
    return radius * _unit_vectors(rng, n)


def _box(rng, n, half=0.5):
    # Uniform over the surface: pick a face axis and sign, the other two coords uniform.
    p = rng.uniform(-half, half, (n, 3))
    axis = rng.integers(0, 3, n)
    sign = np.where(rng.random(n) < 0.5, -half, half)
    p[np.arange(n), axis] = sign
    return p


def _cylinder(rng, n, radius=0.5, half_h=0.5):
    area_side = 2 * np.pi * radius * 2 * half_h
    area_cap = np.pi * radius ** 2
    side = rng.random(n) < area_side / (area_side + 2 * area_cap)
    th = rng.uniform(0, 2 * np.pi, n)
    r = np.where(side, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(side, rng.uniform(-half_h, half_h, n),
                 np.where(rng.random(n) < 0.5, -half_h, half_h))
    return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)


def _figure(rng, n):
    """Body cylinder on the floor plus a head sphere on top; fits in [-0.5, 0.5]^3."""
    nb = int(round(n * 0.6))
    body = _cylinder(rng, nb, radius=0.2, half_h=0.3) + np.array([0.0, 0.0, -0.2])
    head = _sphere(rng, n - nb, radius=0.2) + np.array([0.0, 0.0, 0.3])
    return np.concatenate([body, head])


_SYMMETRIC = {"sphere": _sphere, "box": _box, "cylinder": _cylinder}


class ShapeGenerator:
    provenance = "procedural"

    def generate(self, shape_prompt: str, n: int, seed: int) -> list[PointCloud]:
        raise NotImplementedError


class ProceduralGenerator(ShapeGenerator):
    """Keyword-matched parametric primitives.

    Each candidate gets an independent shrink-only axis scaling in [1 - distortion, 1]
    and per-point radial jitter of at most ``jitter``. Centrally symmetric primitives
    are sampled in antipodal pairs, so their centroid is the origin.
    """

    provenance = "procedural"

    def __init__(self, n_points: int = 512, jitter: float = 0.02, distortion: float = 0.25,
                 strict: bool = False):
        if n_points < MIN_POINTS or n_points % 2:
            raise ValueError(f"n_points must be even and >= {MIN_POINTS}")
        self.n_points = n_points
        self.jitter = jitter
        self.distortion = distortion
        self.strict = strict

    def primitive_for(self, prompt: str) -> str:
        prim = match_primitive(prompt)
        if prim is None:
            if self.strict:
                raise PointCloudError(f"no procedural primitive matches prompt {prompt!r}")
            log.warning("no primitive matches %r; using a sphere", prompt)
            prim = "sphere"
        return prim

    def color_for(self, prompt: str, prim: str) -> np.ndarray:
        for w in _words(prompt):
            if w in COLOR_KEYWORDS:
                return np.array(COLOR_KEYWORDS[w])
        return np.array(DEFAULT_COLORS[prim])

    def candidate(self, prompt: str, seed: int, index: int) -> PointCloud:
        prim = self.primitive_for(prompt)
        rng = np.random.default_rng([seed, index])
        n = self.n_points
        if prim in _SYMMETRIC:
            half = _SYMMETRIC[prim](rng, n // 2)
            pts = np.concatenate([half, -half])
        else:
            pts = _figure(rng, n)
        scale = rng.uniform(1.0 - self.distortion, 1.0, 3)
        pts = pts * scale
        # Radial jitter, antipodal pairs share the same factor so symmetry survives.
        norm = np.linalg.norm(pts, axis=1, keepdims=True)
        dr = rng.uniform(-self.jitter, self.jitter, (n // 2, 1))
        dr = np.concatenate([dr, dr]) if prim in _SYMMETRIC else rng.uniform(-self.jitter, self.jitter, (n, 1))
        pts = pts * (1.0 + dr / np.maximum(norm, 1e-12))
        base = self.color_for(prompt, prim)
        colors = np.clip(base + rng.normal(0, 0.03, (n, 3)), 0.0, 1.0)
        return PointCloud(pts, colors, "procedural")

    def generate(self, shape_prompt, n, seed):
        return [self.candidate(shape_prompt, seed, i) for i in range(n)]


class FileGenerator(ShapeGenerator):
    """Loads a user-supplied PLY; every candidate is the same cloud."""

    provenance = "file"

    def __init__(self, path):
        self.path = path

    def generate(self, shape_prompt, n, seed):
        with open(self.path, "rb") as fh:
            pcd = read_pointcloud_ply(fh.read(), provenance="file")
        return [PointCloud(pcd.positions.copy(), pcd.colors.copy(), "file") for _ in range(n)]


class ExternalGenerator(ShapeGenerator):
    """HTTP text-to-3D endpoint.

    Request: ``{"prompt": str, "n": int, "seed": int}``. Response:
    ``{"candidates": [{"points": [[x, y, z, r, g, b], ...]}, ...]}`` with colors in [0, 1].
    """

    provenance = "external"

    def __init__(self, url: str, timeout: float = 120.0):
        self.url = url
        self.timeout = timeout

    def generate(self, shape_prompt, n, seed):
        body = json.dumps({"prompt": shape_prompt, "n": n, "seed": seed}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                doc = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise PointCloudError(f"external shape generator failed: {exc}") from exc
        try:
            cands = doc["candidates"]
            out = []
            for c in cands[:n]:
                arr = np.asarray(c["points"], dtype=np.float64)
                out.append(PointCloud(arr[:, :3], arr[:, 3:6], "external"))
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise PointCloudError(f"malformed external generator response: {exc}") from exc
        if len(out) != n:
            raise PointCloudError(f"external generator returned {len(out)} candidates, wanted {n}")
        return out


def make_generator(source: str, strict: bool = False, external_url: str | None = None) -> ShapeGenerator:
    """``procedural``, ``file:<path>`` or ``external``."""
    if source == "procedural":
        return ProceduralGenerator(strict=strict)
    if source.startswith("file:"):
        return FileGenerator(source[5:])
    if source == "external":
        url = external_url or os.environ.get("CONCEPTSPLAT_SHAPE_URL")
        if not url:
            raise PointCloudError("external shape source needs CONCEPTSPLAT_SHAPE_URL")
        return ExternalGenerator(url)
    raise ValueError(f"unknown shape source {source!r}")


def generate_candidates(shape_prompt: str, n: int = 4, generator: ShapeGenerator | None = None,
                        seed: int = 0) -> list[PointCloud]:
    if n < 1:
        raise ValueError("need at least one candidate")
    generator = generator or ProceduralGenerator()
    return generator.generate(shape_prompt, n, seed)


# --------------------------------------------------------------------------- normalize / place

def normalize_pointcloud(pcd: PointCloud) -> PointCloud:
    """Bounding-box center to the origin, largest axis extent to 1."""
    lo, hi = pcd.positions.min(axis=0), pcd.positions.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise PointCloudError("degenerate point cloud: all points coincide")
    center = (lo + hi) / 2
    return PointCloud((pcd.positions - center) / extent, pcd.colors.copy(), pcd.provenance)


def place_pointcloud(pcd: PointCloud, transform: PlacementTransform) -> PointCloud:
    """p -> s * p + t."""
    pos = transform.scale * pcd.positions + np.asarray(transform.translation, dtype=np.float64)
    return PointCloud(pos, pcd.colors.copy(), pcd.provenance)


# --------------------------------------------------------------------------- preview + selection

def selector_views(resolution=(64, 64)) -> list[Camera]:
    return [orbit_camera(az, 15.0, 2.2, center=(0.0, 0.0, 0.0), resolution=resolution)
            for az in (0.0, 90.0, 180.0, 270.0)]


def preview_render(pcd: PointCloud, cam: Camera, point_size: float = 0.02):
    """Point-sprite render: square sprites with a z-buffer. Returns (rgb, silhouette)."""
    h, w = cam.resolution
    rgb = np.ones((h, w, 3))
    depth = np.full((h, w), np.inf)
    uv, z = cam.project(pcd.positions)
    ok = (z > cam.near) & (z < cam.far)
    rad = np.maximum(np.round(cam.focal * point_size / np.where(ok, z, 1.0)), 0).astype(int)
    order = np.argsort(-z, kind="stable")  # far to near, later writes win
    for i in order:
        if not ok[i]:
            continue
        cx, cy = int(np.round(uv[i, 0])), int(np.round(uv[i, 1]))
        r = rad[i]
        x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        patch = depth[y0:y1, x0:x1]
        closer = z[i] < patch
        patch[closer] = z[i]
        rgb[y0:y1, x0:x1][closer] = pcd.colors[i]
    return rgb, np.isfinite(depth)


def silhouette_coverage(sil: np.ndarray) -> float:
    return float(sil.mean())


def silhouette_symmetry(sil: np.ndarray) -> float:
    """IoU of the silhouette with its mirror about its own bounding-box center column."""
    cols = np.flatnonzero(sil.any(axis=0))
    if len(cols) == 0:
        return 0.0
    c0, c1 = cols[0], cols[-1]
    crop = sil[:, c0:c1 + 1]
    mirror = crop[:, ::-1]
    union = np.logical_or(crop, mirror).sum()
    return float(np.logical_and(crop, mirror).sum() / union)


class CandidateScorer:
    def score(self, renders: list[tuple[np.ndarray, np.ndarray]]) -> float:
        raise NotImplementedError


class GeometricScorer(CandidateScorer):
    """Mean silhouette coverage plus ``symmetry_weight`` times mean left-right symmetry."""

    def __init__(self, symmetry_weight: float = 0.25):
        self.symmetry_weight = symmetry_weight

    def score(self, renders):
        cov = np.mean([silhouette_coverage(s) for _, s in renders])
        sym = np.mean([silhouette_symmetry(s) for _, s in renders])
        return float(cov + self.symmetry_weight * sym)


def score_candidates(candidates, scorer: CandidateScorer | None = None, views=None) -> np.ndarray:
    """Candidates are previewed after normalization, so scale does not bias the score."""
    scorer = scorer or GeometricScorer()
    views = views if views is not None else selector_views()
    if not views:
        raise ValueError("need at least one view")
    scores = []
    for pcd in candidates:
        norm = normalize_pointcloud(pcd)
        scores.append(scorer.score([preview_render(norm, cam) for cam in views]))
    return np.array(scores)


def select_pointcloud(candidates, scorer: CandidateScorer | None = None, views=None):
    """(index, cloud) of the best-scoring candidate; ties go to the lowest index."""
    if not candidates:
        raise ValueError("need at least one candidate")
    scores = score_candidates(candidates, scorer, views)
    i = int(np.argmax(scores))
    return i, candidates[i]


# --------------------------------------------------------------------------- PLY

def write_pointcloud_ply(pcd: PointCloud, binary: bool = True) -> bytes:
    cols = {a: pcd.positions[:, i].astype("<f4") for i, a in enumerate("xyz")}
    rgb = np.round(pcd.colors * 255).astype(np.uint8)
    for i, a in enumerate(("red", "green", "blue")):
        cols[a] = rgb[:, i]
    return write_ply(cols, binary=binary)


def read_pointcloud_ply(data: bytes, provenance: str = "file") -> PointCloud:
    cols, _ = read_ply(data)
    for a in "xyz":
        if a not in cols:
            raise PlyError(f"point cloud PLY lacks property {a!r}")
    pos = np.stack([cols[a].astype(np.float64) for a in "xyz"], axis=1)
    if all(c in cols for c in ("red", "green", "blue")):
        raw = np.stack([cols[c] for c in ("red", "green", "blue")], axis=1)
        colors = raw / 255.0 if raw.dtype.kind in "ui" else np.clip(raw.astype(np.float64), 0, 1)
    else:
        colors = np.full((len(pos), 3), 0.5)
    return PointCloud(pos, colors, provenance)
