"""Numba kernels for the tile rasterizer.

Pixels are fully independent: each walks its tile's gaussian list in
global depth order, so any tile decomposition of the image produces the
same pixels. Everything runs single-threaded in float64; the backward
kernel replays the forward blend per pixel into small tile-local buffers
and then walks contributors back-to-front accumulating suffix sums.
"""

import numpy as np
from numba import njit

TERMINATE_T = 1e-4
MIN_ALPHA = 1.0 / 255.0


@njit(cache=True)
def rasterize_forward(width, height, tile_size, tiles_x,
                      tile_offsets, tile_items,
                      means, qinv, rects, alphas, colors, background,
                      out_rgb, out_transmit, out_count):
    n_tiles = tile_offsets.shape[0] - 1
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                cnt = 0
                for s in range(lo, hi):
                    if trans < TERMINATE_T:
                        break
                    i = tile_items[s]
                    if px < rects[i, 0] or px > rects[i, 1]:
                        continue
                    if py < rects[i, 2] or py > rects[i, 3]:
                        continue
                    dx = px + 0.5 - means[i, 0]
                    dy = py + 0.5 - means[i, 1]
                    power = (-0.5 * (qinv[i, 0] * dx * dx + qinv[i, 2] * dy * dy)
                             - qinv[i, 1] * dx * dy)
                    alpha_p = alphas[i] * np.exp(power)
                    if alpha_p < MIN_ALPHA:
                        continue
                    w = alpha_p * trans
                    r += colors[i, 0] * w
                    g += colors[i, 1] * w
                    b += colors[i, 2] * w
                    trans *= 1.0 - alpha_p
                    cnt += 1
                out_rgb[py, px, 0] = r + background[0] * trans
                out_rgb[py, px, 1] = g + background[1] * trans
                out_rgb[py, px, 2] = b + background[2] * trans
                out_transmit[py, px] = trans
                out_count[py, px] = cnt


@njit(cache=True)
def rasterize_backward(width, height, tile_size, tiles_x,
                       tile_offsets, tile_items,
                       means, qinv, rects, alphas, colors, background,
                       upstream,
                       d_means, d_qinv, d_alphas, d_colors):
    n_tiles = tile_offsets.shape[0] - 1
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        cap = hi - lo
        if cap == 0:
            continue
        buf_idx = np.empty(cap, dtype=np.int64)
        buf_alpha = np.empty(cap, dtype=np.float64)
        buf_trans = np.empty(cap, dtype=np.float64)
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                # Replay the forward blend, keeping per-contributor state.
                trans = 1.0
                n_hit = 0
                for s in range(lo, hi):
                    if trans < TERMINATE_T:
                        break
                    i = tile_items[s]
                    if px < rects[i, 0] or px > rects[i, 1]:
                        continue
                    if py < rects[i, 2] or py > rects[i, 3]:
                        continue
                    dx = px + 0.5 - means[i, 0]
                    dy = py + 0.5 - means[i, 1]
                    power = (-0.5 * (qinv[i, 0] * dx * dx + qinv[i, 2] * dy * dy)
                             - qinv[i, 1] * dx * dy)
                    alpha_p = alphas[i] * np.exp(power)
                    if alpha_p < MIN_ALPHA:
                        continue
                    buf_idx[n_hit] = i
                    buf_alpha[n_hit] = alpha_p
                    buf_trans[n_hit] = trans
                    n_hit += 1
                    trans *= 1.0 - alpha_p
                u0 = upstream[py, px, 0]
                u1 = upstream[py, px, 1]
                u2 = upstream[py, px, 2]
                # Suffix color sums start from the background term.
                s0 = background[0] * trans
                s1 = background[1] * trans
                s2 = background[2] * trans
                for n in range(n_hit - 1, -1, -1):
                    i = buf_idx[n]
                    alpha_p = buf_alpha[n]
                    t_before = buf_trans[n]
                    w = alpha_p * t_before
                    d_colors[i, 0] += u0 * w
                    d_colors[i, 1] += u1 * w
                    d_colors[i, 2] += u2 * w
                    one_m = 1.0 - alpha_p
                    if one_m > 1e-12:
                        d_alpha_p = (u0 * (colors[i, 0] * t_before - s0 / one_m)
                                     + u1 * (colors[i, 1] * t_before - s1 / one_m)
                                     + u2 * (colors[i, 2] * t_before - s2 / one_m))
                    else:
                        d_alpha_p = (u0 * colors[i, 0] + u1 * colors[i, 1]
                                     + u2 * colors[i, 2]) * t_before
                    s0 += colors[i, 0] * w
                    s1 += colors[i, 1] * w
                    s2 += colors[i, 2] * w
                    d_alphas[i] += d_alpha_p * (alpha_p / alphas[i])
                    d_power = d_alpha_p * alpha_p
                    dx = px + 0.5 - means[i, 0]
                    dy = py + 0.5 - means[i, 1]
                    d_qinv[i, 0] += d_power * (-0.5 * dx * dx)
                    d_qinv[i, 1] += d_power * (-dx * dy)
                    d_qinv[i, 2] += d_power * (-0.5 * dy * dy)
                    d_means[i, 0] += d_power * (qinv[i, 0] * dx + qinv[i, 1] * dy)
                    d_means[i, 1] += d_power * (qinv[i, 1] * dx + qinv[i, 2] * dy)
