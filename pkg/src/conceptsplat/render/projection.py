"""EWA projection of 3D Gaussians to screen-space splats, and its adjoint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import Camera
from ..gaussians import SH_C0, GaussianCloud, quat_to_rotmat, sigmoid

TILE = 16
LOWPASS = 0.3        # pixel^2 added to the screen covariance
CULL_SIGMA = 3.0     # frustum culling extent
SUPPORT_SIGMA = 6.0  # tile assignment extent; exp(-18) ~ 1.5e-8 at the edge


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for the visible subset, front to back."""

    index: np.ndarray    # (n,) indices into the cloud, depth-sorted
    t_cam: np.ndarray    # (n, 3) camera-space centers
    means: np.ndarray    # (n, 2) pixel coordinates
    cov2d: np.ndarray    # (n, 2, 2) regularized screen covariance
    conics: np.ndarray   # (n, 3) inverse covariance entries (a, b, c)
    rects: np.ndarray    # (n, 4) tile rectangle tx0, ty0, tx1, ty1 (inclusive)
    opacity: np.ndarray  # (n,)
    colors: np.ndarray   # (n, 3)
    labels: np.ndarray   # (n,)
    M: np.ndarray        # (n, 2, 3) J @ W, kept for the backward pass
    sigma3: np.ndarray   # (n, 3, 3) world covariance
    rot: np.ndarray      # (n, 3, 3) Gaussian rotation matrices
    color_raw: np.ndarray  # (n, 3) unclamped colors


def _jacobian(t: np.ndarray, f: float) -> np.ndarray:
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = f / z
    J[:, 0, 2] = -f * x / (z * z)
    J[:, 1, 1] = f / z
    J[:, 1, 2] = -f * y / (z * z)
    return J


def max_eigen(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    return 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)


def project(cloud: GaussianCloud, cam: Camera) -> Projection:
    n_all = len(cloud)
    h, w = cam.resolution
    Rw = cam.rotation()
    t = (cloud.mu - cam.position) @ Rw.T
    z = t[:, 2]
    ok = (z > cam.near) & (z < cam.far)
    idx = np.nonzero(ok)[0]
    t = t[idx]
    f = cam.focal
    cx, cy = cam.principal_point

    means = np.stack([f * t[:, 0] / t[:, 2] + cx, f * t[:, 1] / t[:, 2] + cy], axis=1)
    rot = quat_to_rotmat(cloud.rotation[idx])
    var = np.exp(2.0 * cloud.log_scale[idx])
    sigma3 = np.einsum("nij,nj,nkj->nik", rot, var, rot)
    M = _jacobian(t, f) @ Rw
    cov2d = M @ sigma3 @ np.transpose(M, (0, 2, 1))
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    lam = np.sqrt(max_eigen(cov2d))
    r_cull = CULL_SIGMA * lam
    inside = ((means[:, 0] + r_cull >= -0.5) & (means[:, 0] - r_cull <= w - 0.5)
              & (means[:, 1] + r_cull >= -0.5) & (means[:, 1] - r_cull <= h - 0.5))
    r = SUPPORT_SIGMA * lam
    x0 = np.maximum(np.ceil(means[:, 0] - r), 0)
    x1 = np.minimum(np.floor(means[:, 0] + r), w - 1)
    y0 = np.maximum(np.ceil(means[:, 1] - r), 0)
    y1 = np.minimum(np.floor(means[:, 1] + r), h - 1)
    inside &= (x0 <= x1) & (y0 <= y1)

    keep = np.nonzero(inside)[0]
    order = keep[np.argsort(t[keep, 2], kind="stable")]
    rects = np.stack([x0, y0, x1, y1], axis=1)[order].astype(np.int64) // TILE

    c2 = cov2d[order]
    det = c2[:, 0, 0] * c2[:, 1, 1] - c2[:, 0, 1] ** 2
    conics = np.stack([c2[:, 1, 1] / det, -c2[:, 0, 1] / det, c2[:, 0, 0] / det], axis=1)
    gi = idx[order]
    color_raw = SH_C0 * cloud.sh[gi] + 0.5
    return Projection(
        index=gi,
        t_cam=t[order],
        means=np.ascontiguousarray(means[order]),
        cov2d=c2,
        conics=np.ascontiguousarray(conics),
        rects=np.ascontiguousarray(rects),
        opacity=np.ascontiguousarray(sigmoid(cloud.opacity_logit[gi])),
        colors=np.ascontiguousarray(np.clip(color_raw, 0.0, 1.0)),
        labels=np.ascontiguousarray(cloud.labels[gi]),
        M=M[order],
        sigma3=sigma3[order],
        rot=rot[order],
        color_raw=color_raw,
    )


def _rotmat_vjp(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient wrt normalized quaternions (n, 4) given dL/dR (n, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=1)


def project_backward(cloud: GaussianCloud, cam: Camera, proj: Projection,
                     d_means, d_conics, d_opacity, d_colors) -> dict[str, np.ndarray]:
    """Chain screen-space gradients back to the cloud parameters."""
    n_all = len(cloud)
    gi = proj.index
    f = cam.focal
    Rw = cam.rotation()

    grads = {
        "mu": np.zeros((n_all, 3)),
        "log_scale": np.zeros((n_all, 3)),
        "rotation": np.zeros((n_all, 4)),
        "opacity_logit": np.zeros(n_all),
        "sh": np.zeros((n_all, 3)),
    }
    if len(gi) == 0:
        return grads

    live = (proj.color_raw > 0.0) & (proj.color_raw < 1.0)
    grads["sh"][gi] = d_colors * SH_C0 * live
    s = proj.opacity
    grads["opacity_logit"][gi] = d_opacity * s * (1.0 - s)

    # conic = inv(cov2d): dL/dcov = -A G A with G the symmetric conic gradient
    A = np.empty((len(gi), 2, 2))
    A[:, 0, 0] = proj.conics[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = proj.conics[:, 1]
    A[:, 1, 1] = proj.conics[:, 2]
    G = np.empty_like(A)
    G[:, 0, 0] = d_conics[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * d_conics[:, 1]
    G[:, 1, 1] = d_conics[:, 2]
    Gc = -A @ G @ A

    M = proj.M
    Mt = np.transpose(M, (0, 2, 1))
    g_sigma = Mt @ Gc @ M
    g_M = 2.0 * Gc @ M @ proj.sigma3
    g_J = g_M @ Rw.T

    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    z2 = z * z
    z3 = z2 * z
    gu, gv = d_means[:, 0], d_means[:, 1]
    g_t = np.empty((len(gi), 3))
    g_t[:, 0] = gu * f / z - g_J[:, 0, 2] * f / z2
    g_t[:, 1] = gv * f / z - g_J[:, 1, 2] * f / z2
    g_t[:, 2] = (-gu * f * x / z2 - gv * f * y / z2
                 - (g_J[:, 0, 0] + g_J[:, 1, 1]) * f / z2
                 + g_J[:, 0, 2] * 2 * f * x / z3 + g_J[:, 1, 2] * 2 * f * y / z3)
    grads["mu"][gi] = g_t @ Rw

    R = proj.rot
    var = np.exp(2.0 * cloud.log_scale[gi])
    g_var = np.einsum("nji,njk,nki->ni", R, g_sigma, R)
    grads["log_scale"][gi] = 2.0 * var * g_var
    g_R = 2.0 * g_sigma @ R * var[:, None, :]
    q = cloud.rotation[gi]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / qn
    g_qh = _rotmat_vjp(qh, g_R)
    grads["rotation"][gi] = (g_qh - qh * np.sum(qh * g_qh, axis=1, keepdims=True)) / qn
    return grads
