"""Pinhole camera with a look-at frame.

World frame is z-up, right-handed. Camera frame: x right, y down, z forward,
so camera-space depth is positive in front of the camera. Pixel centers sit
on integer coordinates; column ``j`` is ``u = j`` and row ``i`` is ``v = i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov_y: float = np.deg2rad(49.0)
    resolution: tuple[int, int] = (64, 64)  # (h, w)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=np.float64))
        object.__setattr__(self, "up", np.asarray(self.up, dtype=np.float64))
        h, w = self.resolution
        if not 0.0 < self.fov_y < np.pi:
            raise ValueError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        if h < 8 or w < 8:
            raise ValueError(f"resolution must be at least 8x8, got {self.resolution}")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        fwd = self.look_at - self.position
        if np.linalg.norm(fwd) == 0:
            raise ValueError("camera position coincides with look_at")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")

    @property
    def height(self) -> int:
        return self.resolution[0]

    @property
    def width(self) -> int:
        return self.resolution[1]

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels)."""
        return 0.5 * self.height / np.tan(0.5 * self.fov_y)

    @property
    def principal_point(self) -> tuple[float, float]:
        return (0.5 * (self.width - 1), 0.5 * (self.height - 1))

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the right, down, forward axes."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation().T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (N, 2) and camera depth (N,) of world points."""
        pc = self.world_to_camera(np.atleast_2d(points))
        cx, cy = self.principal_point
        f = self.focal
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([f * pc[:, 0] / z + cx, f * pc[:, 1] / z + cy], axis=1)
        return uv, z


def orbit_camera(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float,
    center=(0.0, 0.0, 0.0),
    fov_deg: float = 49.0,
    resolution: tuple[int, int] = (64, 64),
) -> Camera:
    """Camera on a sphere around ``center``; azimuth 0 sits on the +x axis."""
    az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    center = np.asarray(center, dtype=np.float64)
    offset = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return Camera(
        position=center + offset,
        look_at=center,
        fov_y=np.deg2rad(fov_deg),
        resolution=resolution,
    )
