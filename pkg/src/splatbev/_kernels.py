"""Numba kernels for tiled alpha compositing (forward and backward).

Arrays are indexed by *sorted* Gaussian position (ascending camera depth, ties
broken by original scene index upstream). Each tile walks its Gaussian list in
that order, so every pixel composites front to back. Kernels touch only the
tiles in [tile_begin, tile_end), which lets callers shard tiles across threads:
the forward writes disjoint pixels, the backward accumulates into caller-owned
gradient buffers (one set per shard, reduced in shard order for determinism).
"""

import numpy as np
from numba import njit

# Squared Mahalanobis cutoff: contributions beyond radius 3 are exactly zero.
CUTOFF_Q = 9.0
ALPHA_MAX = 0.999


@njit(cache=True, nogil=True)
def composite_tiles_forward(tile_begin, tile_end, tile_starts, tile_gauss,
                            mu_u, mu_v, inv_a, inv_b, inv_c, opac, rgb, feat,
                            depth, bx0, bx1, by0, by1,
                            height, width, n_tiles_x, tile_size, stop_threshold,
                            out_color, out_feat, out_depth, out_alpha):
    """Composite color/feature/depth/alpha for every pixel of the given tiles.

    stop_threshold <= 0 disables early termination; otherwise a pixel stops
    accepting contributions once its transmittance falls below the threshold.
    """
    n_feat = feat.shape[1]
    fbuf = np.empty(n_feat, dtype=np.float64)
    for t in range(tile_begin, tile_end):
        s0 = tile_starts[t]
        s1 = tile_starts[t + 1]
        if s1 == s0:
            continue
        ty = t // n_tiles_x
        tx = t % n_tiles_x
        r1 = min((ty + 1) * tile_size, height)
        c1 = min((tx + 1) * tile_size, width)
        for row in range(ty * tile_size, r1):
            py = row + 0.5
            for col in range(tx * tile_size, c1):
                px = col + 0.5
                T = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                for ch in range(n_feat):
                    fbuf[ch] = 0.0
                for k in range(s0, s1):
                    g = tile_gauss[k]
                    if col < bx0[g] or col > bx1[g] or row < by0[g] or row > by1[g]:
                        continue
                    dx = px - mu_u[g]
                    dy = py - mu_v[g]
                    q = inv_a[g] * dx * dx + 2.0 * inv_b[g] * dx * dy \
                        + inv_c[g] * dy * dy
                    if q > CUTOFF_Q:
                        continue
                    alpha = opac[g] * np.exp(-0.5 * q)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    w = T * alpha
                    acc_r += w * rgb[g, 0]
                    acc_g += w * rgb[g, 1]
                    acc_b += w * rgb[g, 2]
                    acc_d += w * depth[g]
                    for ch in range(n_feat):
                        fbuf[ch] += w * feat[g, ch]
                    T *= 1.0 - alpha
                    if stop_threshold > 0.0 and T < stop_threshold:
                        break
                out_color[row, col, 0] = acc_r
                out_color[row, col, 1] = acc_g
                out_color[row, col, 2] = acc_b
                out_depth[row, col] = acc_d
                out_alpha[row, col] = 1.0 - T
                for ch in range(n_feat):
                    out_feat[row, col, ch] = fbuf[ch]


@njit(cache=True, nogil=True)
def composite_tiles_backward(tile_begin, tile_end, tile_starts, tile_gauss,
                             mu_u, mu_v, inv_a, inv_b, inv_c, opac, rgb, feat,
                             depth, bx0, bx1, by0, by1,
                             height, width, n_tiles_x, tile_size, stop_threshold,
                             up_color, up_feat, up_depth, up_alpha,
                             g_mu_u, g_mu_v, g_cov_a, g_cov_b, g_cov_c,
                             g_opac, g_rgb, g_feat, g_depth):
    """Accumulate loss gradients w.r.t. per-Gaussian 2D quantities.

    Each pixel replays the forward compositing (identical arithmetic,
    including early termination) to recover per-contributor alphas and blend
    weights, then sweeps back to front. Gradients are with respect to the 2D
    mean, the regularized 2D covariance (full-matrix convention), the
    activated opacity, rgb, feature and camera depth of each sorted Gaussian.
    """
    n_feat = feat.shape[1]
    for t in range(tile_begin, tile_end):
        s0 = tile_starts[t]
        s1 = tile_starts[t + 1]
        m = s1 - s0
        if m == 0:
            continue
        alpha_s = np.empty(m, dtype=np.float64)
        w_s = np.empty(m, dtype=np.float64)
        ty = t // n_tiles_x
        tx = t % n_tiles_x
        r1 = min((ty + 1) * tile_size, height)
        c1 = min((tx + 1) * tile_size, width)
        for row in range(ty * tile_size, r1):
            py = row + 0.5
            for col in range(tx * tile_size, c1):
                px = col + 0.5
                # Forward replay.
                T = 1.0
                n_contrib = 0
                for k in range(m):
                    g = tile_gauss[s0 + k]
                    alpha_s[k] = 0.0
                    if col < bx0[g] or col > bx1[g] or row < by0[g] or row > by1[g]:
                        continue
                    dx = px - mu_u[g]
                    dy = py - mu_v[g]
                    q = inv_a[g] * dx * dx + 2.0 * inv_b[g] * dx * dy \
                        + inv_c[g] * dy * dy
                    if q > CUTOFF_Q:
                        continue
                    alpha = opac[g] * np.exp(-0.5 * q)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    alpha_s[k] = alpha
                    w_s[k] = T * alpha
                    T *= 1.0 - alpha
                    n_contrib = k + 1
                    if stop_threshold > 0.0 and T < stop_threshold:
                        break
                if n_contrib == 0:
                    continue
                ucr = up_color[row, col, 0]
                ucg = up_color[row, col, 1]
                ucb = up_color[row, col, 2]
                ud = up_depth[row, col]
                ua = up_alpha[row, col]
                uf = up_feat[row, col]
                # Back-to-front sweep; S = sum over nearer-processed (deeper)
                # contributors of w_k * u_k, the occlusion coupling term.
                S = 0.0
                for k in range(n_contrib - 1, -1, -1):
                    alpha = alpha_s[k]
                    if alpha <= 0.0:
                        continue
                    g = tile_gauss[s0 + k]
                    w = w_s[k]
                    T_i = w / alpha
                    u_k = ucr * rgb[g, 0] + ucg * rgb[g, 1] + ucb * rgb[g, 2] \
                        + ud * depth[g] + ua
                    for ch in range(n_feat):
                        u_k += uf[ch] * feat[g, ch]
                    dl_dalpha = T_i * u_k - S / (1.0 - alpha)
                    S += w * u_k
                    g_rgb[g, 0] += w * ucr
                    g_rgb[g, 1] += w * ucg
                    g_rgb[g, 2] += w * ucb
                    g_depth[g] += w * ud
                    for ch in range(n_feat):
                        g_feat[g, ch] += w * uf[ch]
                    dx = px - mu_u[g]
                    dy = py - mu_v[g]
                    q = inv_a[g] * dx * dx + 2.0 * inv_b[g] * dx * dy \
                        + inv_c[g] * dy * dy
                    gauss = np.exp(-0.5 * q)
                    sg = opac[g] * gauss
                    if sg > ALPHA_MAX:
                        continue  # clamped alpha: zero derivative
                    g_opac[g] += dl_dalpha * gauss
                    adx = inv_a[g] * dx + inv_b[g] * dy
                    ady = inv_b[g] * dx + inv_c[g] * dy
                    coef = dl_dalpha * sg
                    g_mu_u[g] += coef * adx
                    g_mu_v[g] += coef * ady
                    half = 0.5 * coef
                    g_cov_a[g] += half * adx * adx
                    g_cov_b[g] += half * adx * ady
                    g_cov_c[g] += half * ady * ady
