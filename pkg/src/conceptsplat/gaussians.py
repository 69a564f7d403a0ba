"""Concept-labeled 3D Gaussian clouds.

Parameters are stored structure-of-arrays. Each Gaussian has a position, a
log per-axis standard deviation, a unit quaternion (w, x, y, z), an opacity
logit, degree-0 color coefficients and an integer concept label (one-hot on
demand).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .ply import PlyError, read_ply, write_ply

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
INIT_OPACITY = 0.1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(sh):
    return np.clip(SH_C0 * np.asarray(sh) + 0.5, 0.0, 1.0)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from quaternions (..., 4); inputs are normalized first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class Gaussian3D:
    mu: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray
    label: np.ndarray  # one-hot, length k

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def covariance(g: Gaussian3D) -> np.ndarray:
    """R diag(exp(2 log_scale)) R^T for a single Gaussian."""
    return covariances(np.asarray(g.log_scale)[None], np.asarray(g.rotation)[None])[0]


def covariances(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    R = quat_to_rotmat(rotation)
    var = np.exp(2.0 * np.asarray(log_scale))
    return np.einsum("nij,nj,nkj->nik", R, var, R)


@dataclass
class GaussianCloud:
    mu: np.ndarray             # (N, 3)
    log_scale: np.ndarray      # (N, 3)
    rotation: np.ndarray       # (N, 4) unit quaternions, w first
    opacity_logit: np.ndarray  # (N,)
    sh: np.ndarray             # (N, 3) degree-0 coefficients
    labels: np.ndarray         # (N,) int concept index
    k: int
    sh_degree: int = 0

    def __post_init__(self):
        n = len(self.mu)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(n, 3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(n, 4)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        if self.sh_degree != 0:
            raise NotImplementedError("only degree-0 color coefficients are supported")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mu=self.mu[i].copy(),
            log_scale=self.log_scale[i].copy(),
            rotation=self.rotation[i].copy(),
            opacity_logit=float(self.opacity_logit[i]),
            sh_coeffs=self.sh[i].copy(),
            label=self.onehot[i].copy(),
        )

    @classmethod
    def empty(cls, k: int) -> "GaussianCloud":
        z = np.zeros((0, 3))
        return cls(z, z, np.zeros((0, 4)), np.zeros(0), z, np.zeros(0, dtype=np.int64), k)

    @property
    def onehot(self) -> np.ndarray:
        return np.eye(self.k)[self.labels]

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def colors(self) -> np.ndarray:
        return sh_to_rgb(self.sh)

    def covariances(self) -> np.ndarray:
        return covariances(self.log_scale, self.rotation)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.mu.copy(), self.log_scale.copy(), self.rotation.copy(),
                             self.opacity_logit.copy(), self.sh.copy(), self.labels.copy(),
                             self.k, self.sh_degree)

    def subset(self, keep: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(self.mu[keep], self.log_scale[keep], self.rotation[keep],
                             self.opacity_logit[keep], self.sh[keep], self.labels[keep],
                             self.k, self.sh_degree)

    def params(self) -> dict[str, np.ndarray]:
        """Differentiable parameter groups, by name (views, not copies)."""
        return {"mu": self.mu, "log_scale": self.log_scale, "rotation": self.rotation,
                "opacity_logit": self.opacity_logit, "sh": self.sh}

    def normalize_rotations(self) -> None:
        self.rotation /= np.linalg.norm(self.rotation, axis=1, keepdims=True)

    def equals(self, other: "GaussianCloud") -> bool:
        return (self.k == other.k and self.sh_degree == other.sh_degree
                and all(np.array_equal(a, b) for a, b in
                        zip(self._fields(), other._fields())))

    def _fields(self):
        return (self.mu, self.log_scale, self.rotation, self.opacity_logit, self.sh, self.labels)


def mean_neighbor_distance(points: np.ndarray, n_neighbors: int = 3) -> np.ndarray:
    """Per-point mean distance to its nearest neighbours (excluding itself)."""
    n = len(points)
    if n < 2:
        return np.full(n, 0.01)
    kk = min(n_neighbors, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    return dist[:, 1:].mean(axis=1)


def init_from_pointclouds(placed, k: int, min_scale: float = 1e-4) -> GaussianCloud:
    """One Gaussian per point; ``placed`` is a sequence of (PointCloud, concept_id)."""
    placed = list(placed)
    if not placed:
        raise ValueError("no point clouds to initialize from")
    pos, col, lab = [], [], []
    for pcd, cid in placed:
        if not 0 <= cid < k:
            raise ValueError(f"concept id {cid} out of range for k={k}")
        if len(pcd.positions) == 0:
            raise ValueError(f"point cloud for concept {cid} is empty")
        pos.append(pcd.positions)
        col.append(pcd.colors)
        lab.append(np.full(len(pcd.positions), cid, dtype=np.int64))
    pos = np.concatenate(pos)
    col = np.concatenate(col)
    lab = np.concatenate(lab)
    n = len(pos)
    std = np.maximum(mean_neighbor_distance(pos), min_scale)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        mu=pos.copy(),
        log_scale=np.repeat(np.log(std)[:, None], 3, axis=1),
        rotation=rot,
        opacity_logit=np.full(n, logit(INIT_OPACITY)),
        sh=rgb_to_sh(col),
        labels=lab,
        k=k,
    )


_PLY_FLOAT_FIELDS = (
    ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity_logit"]
    + [f"log_scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def export_ply(cloud: GaussianCloud, binary: bool = True) -> bytes:
    """Doubles for every float field plus a uint8 ``concept_label``."""
    if cloud.k > 256:
        raise ValueError("concept_label is stored as uint8; k must be <= 256")
    cols = {}
    for i, a in enumerate("xyz"):
        cols[a] = cloud.mu[:, i]
    for i in range(3):
        cols[f"f_dc_{i}"] = cloud.sh[:, i]
    cols["opacity_logit"] = cloud.opacity_logit
    for i in range(3):
        cols[f"log_scale_{i}"] = cloud.log_scale[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = cloud.rotation[:, i]
    cols = {name: np.ascontiguousarray(v, dtype="<f8") for name, v in cols.items()}
    cols["concept_label"] = cloud.labels.astype(np.uint8)
    return write_ply(cols, binary=binary,
                     comments=[f"concept_k {cloud.k}", f"sh_degree {cloud.sh_degree}"])


def import_ply(data: bytes, k: int | None = None) -> GaussianCloud:
    cols, comments = read_ply(data)
    missing = [f for f in _PLY_FLOAT_FIELDS if f not in cols]
    if missing:
        raise PlyError(f"missing Gaussian properties: {missing}")
    meta = {}
    for c in comments:
        parts = c.split()
        if len(parts) == 2:
            meta[parts[0]] = parts[1]
    n = len(cols["x"])
    if "concept_label" in cols:
        labels = cols["concept_label"].astype(np.int64)
    else:
        log.warning("PLY has no concept_label property; assigning concept 0 to all Gaussians")
        labels = np.zeros(n, dtype=np.int64)
    if k is None:
        k = int(meta.get("concept_k", int(labels.max()) + 1 if n else 1))
    if n and labels.max() >= k:
        raise PlyError(f"concept_label {int(labels.max())} out of range for k={k}")
    f = {name: cols[name].astype(np.float64) for name in _PLY_FLOAT_FIELDS}
    return GaussianCloud(
        mu=np.stack([f["x"], f["y"], f["z"]], axis=1),
        log_scale=np.stack([f[f"log_scale_{i}"] for i in range(3)], axis=1),
        rotation=np.stack([f[f"rot_{i}"] for i in range(4)], axis=1),
        opacity_logit=f["opacity_logit"],
        sh=np.stack([f[f"f_dc_{i}"] for i in range(3)], axis=1),
        labels=labels,
        k=k,
        sh_degree=int(meta.get("sh_degree", 0)),
    )
