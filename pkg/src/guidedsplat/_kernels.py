"""Compiled per-tile compositing loops (forward and reverse-mode).

Each call handles one tile: every pixel walks the tile's depth-ordered splat
list front to back, skipping contributions below the alpha cutoff and
stopping before the splat that would drop transmittance under the floor.
Gradients for the tile are accumulated into per-list-position buffers in
pixel-major order, so the result is independent of how tiles are scheduled.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _alpha(dx, dy, ca, cb, cc, opac, alpha_max):
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    gauss = np.exp(power)
    raw = opac * gauss
    return gauss, raw, min(alpha_max, raw)


@njit(cache=True, nogil=True)
def forward_tile(y0, y1, x0, x1, ids, mean2d, conic, opac, colors, depth, bg,
                 alpha_cutoff, floor, alpha_max):
    h, w = y1 - y0, x1 - x0
    image = np.empty((h, w, 3), mean2d.dtype)
    trans_out = np.empty((h, w), mean2d.dtype)
    counts = np.zeros((h, w), np.int32)
    depth_out = np.zeros((h, w), mean2d.dtype)
    for yy in range(h):
        py = float(y0 + yy)
        for xx in range(w):
            px = float(x0 + xx)
            t = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            dsum = 0.0
            wsum = 0.0
            n = 0
            for k in range(ids.shape[0]):
                j = ids[k]
                _, _, a = _alpha(px - mean2d[j, 0], py - mean2d[j, 1], conic[j, 0],
                                 conic[j, 1], conic[j, 2], opac[j], alpha_max)
                if a < alpha_cutoff:
                    continue
                t_next = t * (1 - a)
                if t_next < floor:
                    break
                wgt = a * t
                r += wgt * colors[j, 0]
                g += wgt * colors[j, 1]
                b += wgt * colors[j, 2]
                dsum += wgt * depth[j]
                wsum += wgt
                n += 1
                t = t_next
            image[yy, xx, 0] = r + t * bg[0]
            image[yy, xx, 1] = g + t * bg[1]
            image[yy, xx, 2] = b + t * bg[2]
            trans_out[yy, xx] = t
            counts[yy, xx] = n
            depth_out[yy, xx] = dsum / wsum if wsum > 0 else 0
    return image, trans_out, counts, depth_out


@njit(cache=True, nogil=True)
def backward_tile(y0, y1, x0, x1, ids, mean2d, conic, opac, colors, bg, grad_image,
                  alpha_cutoff, floor, alpha_max):
    m = ids.shape[0]
    g_mean = np.zeros((m, 2), mean2d.dtype)
    g_conic = np.zeros((m, 3), mean2d.dtype)
    g_opac = np.zeros(m, mean2d.dtype)
    g_color = np.zeros((m, 3), mean2d.dtype)
    # per-pixel scratch: list position, alpha, transmittance before the splat
    pos = np.empty(m, np.int64)
    alphas = np.empty(m, np.float64)
    t_before = np.empty(m, np.float64)
    for yy in range(y1 - y0):
        py = float(y0 + yy)
        for xx in range(x1 - x0):
            px = float(x0 + xx)
            gr = grad_image[y0 + yy, x0 + xx, 0]
            gg = grad_image[y0 + yy, x0 + xx, 1]
            gb = grad_image[y0 + yy, x0 + xx, 2]
            t = 1.0
            n = 0
            for k in range(m):
                j = ids[k]
                _, _, a = _alpha(px - mean2d[j, 0], py - mean2d[j, 1], conic[j, 0],
                                 conic[j, 1], conic[j, 2], opac[j], alpha_max)
                if a < alpha_cutoff:
                    continue
                t_next = t * (1 - a)
                if t_next < floor:
                    break
                pos[n] = k
                alphas[n] = a
                t_before[n] = t
                n += 1
                t = t_next
            # suffix = dL/dC . (sum of later contributions + T_final * bg)
            suffix = t * (gr * bg[0] + gg * bg[1] + gb * bg[2])
            for i in range(n - 1, -1, -1):
                k = pos[i]
                j = ids[k]
                a = alphas[i]
                tb = t_before[i]
                wgt = a * tb
                gc = gr * colors[j, 0] + gg * colors[j, 1] + gb * colors[j, 2]
                g_color[k, 0] += wgt * gr
                g_color[k, 1] += wgt * gg
                g_color[k, 2] += wgt * gb
                dx = px - mean2d[j, 0]
                dy = py - mean2d[j, 1]
                ca, cb, cc = conic[j, 0], conic[j, 1], conic[j, 2]
                gauss, raw, _ = _alpha(dx, dy, ca, cb, cc, opac[j], alpha_max)
                if raw < alpha_max:
                    g_a = tb * gc - suffix / (1 - a)
                    g_opac[k] += g_a * gauss
                    g_pow = g_a * raw
                    g_mean[k, 0] += g_pow * (ca * dx + cb * dy)
                    g_mean[k, 1] += g_pow * (cb * dx + cc * dy)
                    g_conic[k, 0] += -0.5 * g_pow * dx * dx
                    g_conic[k, 1] += -g_pow * dx * dy
                    g_conic[k, 2] += -0.5 * g_pow * dy * dy
                suffix += wgt * gc
    return g_mean, g_conic, g_opac, g_color
