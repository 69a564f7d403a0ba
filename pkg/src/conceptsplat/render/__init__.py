"""Differentiable splatting of color and concept channels.

Color and concept maps are composited front to back with the same weights;
the concept map has no background term, so per pixel the concept channels sum
to the accumulated opacity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..camera import Camera
from ..gaussians import Gaussian3D, GaussianCloud
from . import backend
from .projection import TILE, Projection, project, project_backward

__all__ = [
    "RenderOutput", "RenderGradients", "Splat2D", "render", "render_backward",
    "threshold_masks", "project_gaussian", "backend",
]


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    label: int


@dataclass
class RenderOutput:
    color: np.ndarray       # (h, w, 3)
    concept: np.ndarray     # (k, h, w)
    alpha: np.ndarray       # (h, w)
    masks: np.ndarray       # (k, h, w) bool
    background_mask: np.ndarray  # (h, w) bool
    transmittance: np.ndarray    # (h, w)
    state: "_ForwardState | None" = field(default=None, repr=False)


@dataclass
class _ForwardState:
    cloud: GaussianCloud
    cam: Camera
    proj: Projection
    bg: np.ndarray
    backend: str


@dataclass
class RenderGradients:
    mu: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"mu": self.mu, "log_scale": self.log_scale, "rotation": self.rotation,
                "opacity_logit": self.opacity_logit, "sh": self.sh}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


def threshold_masks(M: np.ndarray, tau: float = 0.5):
    """Binary concept masks ``M > tau`` and the complement of their union."""
    masks = np.asarray(M) > tau
    return masks, ~np.any(masks, axis=0)


def project_gaussian(g: Gaussian3D, cam: Camera) -> Splat2D | None:
    """Project one Gaussian; ``None`` when culled."""
    k = len(g.label)
    cloud = GaussianCloud(g.mu[None], g.log_scale[None], g.rotation[None],
                          [g.opacity_logit], g.sh_coeffs[None], [int(np.argmax(g.label))], k)
    p = project(cloud, cam)
    if len(p.index) == 0:
        return None
    return Splat2D(mean2d=p.means[0], cov2d=p.cov2d[0], depth=float(p.t_cam[0, 2]),
                   color=p.colors[0], label=int(p.labels[0]))


def render(cloud: GaussianCloud, cam: Camera, bg_color=(1.0, 1.0, 1.0), tau: float = 0.5,
           backend_name: str | None = None) -> RenderOutput:
    h, w = cam.resolution
    bg = np.asarray(bg_color, dtype=np.float64).reshape(3)
    name = backend_name or backend.active()
    proj = project(cloud, cam)
    color, concept, t_final = backend.forward(proj, h, w, cloud.k, bg, TILE, backend=name)
    masks, bg_mask = threshold_masks(concept, tau)
    return RenderOutput(
        color=color,
        concept=concept,
        alpha=1.0 - t_final,
        masks=masks,
        background_mask=bg_mask,
        transmittance=t_final,
        state=_ForwardState(cloud, cam, proj, bg, name),
    )


def render_backward(out: RenderOutput, grad_color: np.ndarray) -> RenderGradients:
    """Gradients of sum(grad_color * color) wrt all differentiable cloud parameters."""
    st = out.state
    if st is None:
        raise ValueError("render output carries no forward state; call render() first")
    h, w = st.cam.resolution
    grad_color = np.asarray(grad_color, dtype=np.float64)
    if grad_color.shape != (h, w, 3):
        raise ValueError(f"grad_color must have shape {(h, w, 3)}, got {grad_color.shape}")
    dm, dcon, dop, dcol = backend.backward(st.proj, h, w, st.bg, TILE, grad_color,
                                           backend=st.backend)
    g = project_backward(st.cloud, st.cam, st.proj, dm, dcon, dop, dcol)
    return RenderGradients(**g)
