# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile rasterizer: forward compositing and its exact adjoint."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

DEF ALPHA_MAX = 0.99


def rasterize_forward(const double[:, ::1] means, const double[:, ::1] conics,
                      const double[::1] opacity, const double[:, ::1] colors,
                      const long[::1] labels, const long[::1] offsets, const long[::1] ids,
                      int h, int w, int k, const double[::1] bg, int tile):
    cdef Py_ssize_t n_tx = (w + tile - 1) // tile
    cdef Py_ssize_t n_ty = (h + tile - 1) // tile
    out_color = np.empty((h, w, 3))
    out_concept = np.zeros((k, h, w))
    out_t = np.empty((h, w))
    cdef double[:, :, ::1] color = out_color
    cdef double[:, :, ::1] concept = out_concept
    cdef double[:, ::1] t_final = out_t
    cdef Py_ssize_t tx, ty, px, py, idx, g, start, end
    cdef double T, cr, cg, cb, dx, dy, power, a, wgt

    for ty in range(n_ty):
        for tx in range(n_tx):
            start = offsets[ty * n_tx + tx]
            end = offsets[ty * n_tx + tx + 1]
            for py in range(ty * tile, min(h, (ty + 1) * tile)):
                for px in range(tx * tile, min(w, (tx + 1) * tile)):
                    T = 1.0
                    cr = 0.0
                    cg = 0.0
                    cb = 0.0
                    for idx in range(start, end):
                        g = ids[idx]
                        dx = px - means[g, 0]
                        dy = py - means[g, 1]
                        power = 0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) + conics[g, 1] * dx * dy
                        a = opacity[g] * exp(-power)
                        if a > ALPHA_MAX:
                            a = ALPHA_MAX
                        wgt = a * T
                        cr += wgt * colors[g, 0]
                        cg += wgt * colors[g, 1]
                        cb += wgt * colors[g, 2]
                        concept[labels[g], py, px] += wgt
                        T *= 1.0 - a
                    color[py, px, 0] = cr + T * bg[0]
                    color[py, px, 1] = cg + T * bg[1]
                    color[py, px, 2] = cb + T * bg[2]
                    t_final[py, px] = T
    return out_color, out_concept, out_t


def rasterize_backward(const double[:, ::1] means, const double[:, ::1] conics,
                       const double[::1] opacity, const double[:, ::1] colors,
                       const long[::1] offsets, const long[::1] ids,
                       int h, int w, const double[::1] bg, int tile,
                       const double[:, :, ::1] grad_color):
    cdef Py_ssize_t n = means.shape[0]
    cdef Py_ssize_t n_tx = (w + tile - 1) // tile
    cdef Py_ssize_t n_ty = (h + tile - 1) // tile
    out_dm = np.zeros((n, 2))
    out_dcon = np.zeros((n, 3))
    out_dop = np.zeros(n)
    out_dcol = np.zeros((n, 3))
    cdef double[:, ::1] d_means = out_dm
    cdef double[:, ::1] d_conics = out_dcon
    cdef double[::1] d_opacity = out_dop
    cdef double[:, ::1] d_colors = out_dcol

    cdef Py_ssize_t max_len = 0, t_id
    for t_id in range(n_tx * n_ty):
        if offsets[t_id + 1] - offsets[t_id] > max_len:
            max_len = offsets[t_id + 1] - offsets[t_id]
    buf_a = np.empty(max(max_len, 1))
    buf_T = np.empty(max(max_len, 1))
    buf_G = np.empty(max(max_len, 1))
    buf_live = np.empty(max(max_len, 1), dtype=np.uint8)
    cdef double[::1] A = buf_a
    cdef double[::1] Ts = buf_T
    cdef double[::1] Gs = buf_G
    cdef unsigned char[::1] live = buf_live

    cdef Py_ssize_t tx, ty, px, py, idx, g, start, end, j
    cdef double T, dx, dy, power, a, G, gr, gg, gb, sr, sg, sb, wgt, dLda, dLdp, inv

    for ty in range(n_ty):
        for tx in range(n_tx):
            start = offsets[ty * n_tx + tx]
            end = offsets[ty * n_tx + tx + 1]
            if end == start:
                continue
            for py in range(ty * tile, min(h, (ty + 1) * tile)):
                for px in range(tx * tile, min(w, (tx + 1) * tile)):
                    gr = grad_color[py, px, 0]
                    gg = grad_color[py, px, 1]
                    gb = grad_color[py, px, 2]
                    T = 1.0
                    for idx in range(start, end):
                        g = ids[idx]
                        j = idx - start
                        dx = px - means[g, 0]
                        dy = py - means[g, 1]
                        power = 0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) + conics[g, 1] * dx * dy
                        G = exp(-power)
                        a = opacity[g] * G
                        live[j] = 1
                        if a > ALPHA_MAX:
                            a = ALPHA_MAX
                            live[j] = 0
                        A[j] = a
                        Gs[j] = G
                        Ts[j] = T
                        T *= 1.0 - a
                    # sr/sg/sb: colour composited behind the current splat, scaled by transmittance
                    sr = T * bg[0]
                    sg = T * bg[1]
                    sb = T * bg[2]
                    for idx in range(end - 1, start - 1, -1):
                        g = ids[idx]
                        j = idx - start
                        a = A[j]
                        wgt = a * Ts[j]
                        d_colors[g, 0] += wgt * gr
                        d_colors[g, 1] += wgt * gg
                        d_colors[g, 2] += wgt * gb
                        inv = 1.0 / (1.0 - a)
                        dLda = (gr * (Ts[j] * colors[g, 0] - sr * inv)
                                + gg * (Ts[j] * colors[g, 1] - sg * inv)
                                + gb * (Ts[j] * colors[g, 2] - sb * inv))
                        sr += wgt * colors[g, 0]
                        sg += wgt * colors[g, 1]
                        sb += wgt * colors[g, 2]
                        if not live[j]:
                            continue
                        d_opacity[g] += dLda * Gs[j]
                        dLdp = -dLda * a
                        dx = px - means[g, 0]
                        dy = py - means[g, 1]
                        d_means[g, 0] -= dLdp * (conics[g, 0] * dx + conics[g, 1] * dy)
                        d_means[g, 1] -= dLdp * (conics[g, 1] * dx + conics[g, 2] * dy)
                        d_conics[g, 0] += dLdp * 0.5 * dx * dx
                        d_conics[g, 1] += dLdp * dx * dy
                        d_conics[g, 2] += dLdp * 0.5 * dy * dy
    return out_dm, out_dcon, out_dop, out_dcol
