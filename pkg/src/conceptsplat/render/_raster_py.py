"""Pure numpy rasterizer, used when the compiled extension is unavailable.

Dense over (splat, pixel) pairs within chunks of pixel rows; each splat only
touches pixels inside its tile rectangle, matching the compiled kernel.
"""
from __future__ import annotations

import numpy as np

ALPHA_MAX = 0.99
ROW_CHUNK = 16


def _alpha_block(means, conics, opacity, rects, tile, y0, y1, w):
    ys, xs = np.mgrid[y0:y1, 0:w]
    px = xs.ravel().astype(np.float64)
    py = ys.ravel().astype(np.float64)
    dx = px[None, :] - means[:, 0:1]
    dy = py[None, :] - means[:, 1:2]
    power = 0.5 * (conics[:, 0:1] * dx * dx + conics[:, 2:3] * dy * dy) + conics[:, 1:2] * dx * dy
    G = np.exp(-power)
    raw = opacity[:, None] * G
    tx = (xs.ravel() // tile)[None, :]
    ty = (ys.ravel() // tile)[None, :]
    support = ((tx >= rects[:, 0:1]) & (tx <= rects[:, 2:3])
               & (ty >= rects[:, 1:2]) & (ty <= rects[:, 3:4]))
    clipped = raw > ALPHA_MAX
    alpha = np.where(support, np.minimum(raw, ALPHA_MAX), 0.0)
    return dx, dy, G, alpha, support & ~clipped


def _transmittance(alpha):
    one_minus = 1.0 - alpha
    T = np.ones_like(alpha)
    if len(alpha) > 1:
        T[1:] = np.cumprod(one_minus[:-1], axis=0)
    T_final = T[-1] * one_minus[-1] if len(alpha) else np.ones(alpha.shape[1])
    return T, T_final


def rasterize_forward(means, conics, opacity, colors, labels, rects, h, w, k, bg, tile):
    n = len(means)
    color = np.empty((h, w, 3))
    concept = np.zeros((k, h, w))
    t_final = np.empty((h, w))
    onehot = np.eye(k)[labels] if n else np.zeros((0, k))
    for y0 in range(0, h, ROW_CHUNK):
        y1 = min(h, y0 + ROW_CHUNK)
        if n == 0:
            color[y0:y1] = bg
            t_final[y0:y1] = 1.0
            continue
        _, _, _, alpha, _ = _alpha_block(means, conics, opacity, rects, tile, y0, y1, w)
        T, Tf = _transmittance(alpha)
        wgt = alpha * T
        c = wgt.T @ colors + Tf[:, None] * bg[None, :]
        color[y0:y1] = c.reshape(y1 - y0, w, 3)
        concept[:, y0:y1] = (wgt.T @ onehot).T.reshape(k, y1 - y0, w)
        t_final[y0:y1] = Tf.reshape(y1 - y0, w)
    return color, concept, t_final


def rasterize_backward(means, conics, opacity, colors, labels, rects, h, w, bg, tile, grad_color):
    n = len(means)
    d_means = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_colors = np.zeros((n, 3))
    if n == 0:
        return d_means, d_conics, d_opacity, d_colors
    for y0 in range(0, h, ROW_CHUNK):
        y1 = min(h, y0 + ROW_CHUNK)
        dx, dy, G, alpha, live = _alpha_block(means, conics, opacity, rects, tile, y0, y1, w)
        T, Tf = _transmittance(alpha)
        wgt = alpha * T
        gc = grad_color[y0:y1].reshape(-1, 3)
        # colour behind splat i, already attenuated by T_{i+1}
        contrib = wgt[:, :, None] * colors[:, None, :]
        behind = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib + (Tf[:, None] * bg[None, :])[None]
        d_colors += np.einsum("np,pc->nc", wgt, gc)
        dL_dalpha = np.einsum("npc,pc->np",
                              T[:, :, None] * colors[:, None, :] - behind / (1.0 - alpha)[:, :, None], gc)
        dL_dalpha = np.where(live, dL_dalpha, 0.0)
        d_opacity += np.sum(dL_dalpha * G, axis=1)
        dL_dpower = -dL_dalpha * alpha
        d_means[:, 0] -= np.sum(dL_dpower * (conics[:, 0:1] * dx + conics[:, 1:2] * dy), axis=1)
        d_means[:, 1] -= np.sum(dL_dpower * (conics[:, 1:2] * dx + conics[:, 2:3] * dy), axis=1)
        d_conics[:, 0] += np.sum(dL_dpower * 0.5 * dx * dx, axis=1)
        d_conics[:, 1] += np.sum(dL_dpower * dx * dy, axis=1)
        d_conics[:, 2] += np.sum(dL_dpower * 0.5 * dy * dy, axis=1)
    return d_means, d_conics, d_opacity, d_colors
