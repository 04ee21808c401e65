"""Numba splatting kernels: tile-parallel forward, back-to-front analytic backward.

Tiles are processed in parallel; gradients accumulate into per-entry buffers
(an entry = one splat listed in one tile), so results are independent of the
thread schedule. The caller reduces entry gradients to per-splat gradients.

All thresholds must stay in sync with render.py.
"""

import numpy as np
from numba import njit, prange

TILE = 16
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4


@njit(cache=True, parallel=True, fastmath=False)
def forward_kernel(u, v, conic, radius, opacity, channels, tile_start, entry_splat, ntx, image, alpha):
    """Composite splats front-to-back into image (H, W, C) and alpha (H, W)."""
    H, W, C = image.shape
    n_tiles = tile_start.shape[0] - 1
    for tile in prange(n_tiles):
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        if s1 == s0:
            continue
        ty = tile // ntx
        tx = tile - ty * ntx
        y_lo = ty * TILE
        x_lo = tx * TILE
        y_hi = min(y_lo + TILE, H)
        x_hi = min(x_lo + TILE, W)
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                T = 1.0
                for e in range(s0, s1):
                    if T < TRANSMITTANCE_MIN:
                        break
                    g = entry_splat[e]
                    dx = px - u[g]
                    dy = py - v[g]
                    if dx * dx + dy * dy > radius[g] * radius[g]:
                        continue
                    pw = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    a = opacity[g] * np.exp(pw)
                    if a < ALPHA_SKIP:
                        continue
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    w = a * T
                    for ch in range(C):
                        image[py, px, ch] += w * channels[g, ch]
                    alpha[py, px] += w
                    T = T * (1.0 - a)


@njit(cache=True, parallel=True, fastmath=False)
def backward_kernel(
    u, v, conic, radius, opacity, channels,
    tile_start, entry_splat, ntx,
    g_image, g_alpha,
    g_u, g_v, g_conic, g_opacity, g_channels,
):
    """Per-entry gradients of sum(image * g_image) + sum(alpha * g_alpha).

    Walks each pixel back-to-front, reconstructing transmittance by division
    (alpha <= 0.99 keeps 1 - alpha >= 0.01).
    """
    H, W, C = g_image.shape
    n_tiles = tile_start.shape[0] - 1
    for tile in prange(n_tiles):
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        if s1 == s0:
            continue
        ty = tile // ntx
        tx = tile - ty * ntx
        y_lo = ty * TILE
        x_lo = tx * TILE
        y_hi = min(y_lo + TILE, H)
        x_hi = min(x_lo + TILE, W)
        suffix_c = np.zeros(C, dtype=g_image.dtype)
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                # Pass 1: replay the forward walk to find the last contributor and T_end.
                T = 1.0
                last = -1
                for e in range(s0, s1):
                    if T < TRANSMITTANCE_MIN:
                        break
                    g = entry_splat[e]
                    dx = px - u[g]
                    dy = py - v[g]
                    if dx * dx + dy * dy > radius[g] * radius[g]:
                        continue
                    pw = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    a = opacity[g] * np.exp(pw)
                    if a < ALPHA_SKIP:
                        continue
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    last = e
                    T = T * (1.0 - a)
                if last < 0:
                    continue
                # Pass 2: back-to-front, accumulating suffix blends.
                ga = g_alpha[py, px]
                for ch in range(C):
                    suffix_c[ch] = 0.0
                suffix_a = 0.0
                for e in range(last, s0 - 1, -1):
                    g = entry_splat[e]
                    dx = px - u[g]
                    dy = py - v[g]
                    if dx * dx + dy * dy > radius[g] * radius[g]:
                        continue
                    pw = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    expw = np.exp(pw)
                    a_raw = opacity[g] * expw
                    if a_raw < ALPHA_SKIP:
                        continue
                    clamped = a_raw > ALPHA_CLAMP
                    a = ALPHA_CLAMP if clamped else a_raw
                    T = T / (1.0 - a)  # transmittance in front of this entry
                    w = a * T
                    dot = ga
                    for ch in range(C):
                        gc = g_image[py, px, ch]
                        dot += gc * channels[g, ch]
                        g_channels[e, ch] += w * gc
                    g_a = T * dot
                    sdot = ga * suffix_a
                    for ch in range(C):
                        sdot += g_image[py, px, ch] * suffix_c[ch]
                    g_a -= sdot / (1.0 - a)
                    if not clamped:
                        g_pw = g_a * a
                        g_opacity[e] += g_a * expw
                        g_u[e] += g_pw * (conic[g, 0] * dx + conic[g, 1] * dy)
                        g_v[e] += g_pw * (conic[g, 2] * dy + conic[g, 1] * dx)
                        g_conic[e, 0] += -0.5 * dx * dx * g_pw
                        g_conic[e, 1] += -dx * dy * g_pw
                        g_conic[e, 2] += -0.5 * dy * dy * g_pw
                    for ch in range(C):
                        suffix_c[ch] += w * channels[g, ch]
                    suffix_a += w


@njit(cache=True, parallel=True, fastmath=False)
def count_contrib_kernel(u, v, conic, radius, opacity, tile_start, entry_splat, ntx, H, W, counts):
    """Number of blend contributors per tile (for contributor-list allocation)."""
    n_tiles = tile_start.shape[0] - 1
    for tile in prange(n_tiles):
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        if s1 == s0:
            continue
        ty = tile // ntx
        tx = tile - ty * ntx
        total = 0
        for py in range(ty * TILE, min(ty * TILE + TILE, H)):
            for px in range(tx * TILE, min(tx * TILE + TILE, W)):
                T = 1.0
                for e in range(s0, s1):
                    if T < TRANSMITTANCE_MIN:
                        break
                    g = entry_splat[e]
                    dx = px - u[g]
                    dy = py - v[g]
                    if dx * dx + dy * dy > radius[g] * radius[g]:
                        continue
                    pw = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    a = opacity[g] * np.exp(pw)
                    if a < ALPHA_SKIP:
                        continue
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    total += 1
                    T = T * (1.0 - a)
        counts[tile] = total


@njit(cache=True, parallel=True, fastmath=False)
def fill_contrib_kernel(
    u, v, conic, radius, opacity, tile_start, entry_splat, ntx, H, W,
    out_start, out_pixel, out_splat, out_weight,
):
    """Write (pixel, splat, weight) triples per tile, pixels in scan order, front-to-back."""
    n_tiles = tile_start.shape[0] - 1
    for tile in prange(n_tiles):
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        if s1 == s0:
            continue
        ty = tile // ntx
        tx = tile - ty * ntx
        pos = out_start[tile]
        for py in range(ty * TILE, min(ty * TILE + TILE, H)):
            for px in range(tx * TILE, min(tx * TILE + TILE, W)):
                T = 1.0
                for e in range(s0, s1):
                    if T < TRANSMITTANCE_MIN:
                        break
                    g = entry_splat[e]
                    dx = px - u[g]
                    dy = py - v[g]
                    if dx * dx + dy * dy > radius[g] * radius[g]:
                        continue
                    pw = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    a = opacity[g] * np.exp(pw)
                    if a < ALPHA_SKIP:
                        continue
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    out_pixel[pos] = py * W + px
                    out_splat[pos] = g
                    out_weight[pos] = a * T
                    pos += 1
                    T = T * (1.0 - a)
