"""Numba kernels for tile compositing and greedy similarity reduction.

Tiles are independent, so the per-tile loops run under ``prange``; every
accumulation that crosses tiles happens afterwards in fixed entry order,
which keeps outputs bitwise identical for any thread count.
"""

import numpy as np
from numba import njit, prange

_TILE = 16
_ALPHA_MAX = 0.99
_ALPHA_MIN = 1.0 / 255.0
_T_EPS = 1e-4


@njit(cache=True, parallel=True)
def _forward(tile_entries, tile_start, tiles_x, height, width,
             means2d, conic, opacity, payload, out, trans):
    channels = payload.shape[1]
    n_tiles = tile_start.shape[0] - 1
    for tile in prange(n_tiles):
        lo, hi = tile_start[tile], tile_start[tile + 1]
        ty, tx = tile // tiles_x, tile % tiles_x
        y0, x0 = ty * _TILE, tx * _TILE
        y1, x1 = min(height, y0 + _TILE), min(width, x0 + _TILE)
        for y in range(y0, y1):
            py = y + 0.5
            for x in range(x0, x1):
                px = x + 0.5
                t_cur = 1.0
                for e in range(lo, hi):
                    if t_cur < _T_EPS:
                        break
                    r = tile_entries[e]
                    dx = px - means2d[r, 0]
                    dy = py - means2d[r, 1]
                    power = -0.5 * (conic[r, 0] * dx * dx
                                    + 2.0 * conic[r, 1] * dx * dy
                                    + conic[r, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    alpha = opacity[r] * np.exp(power)
                    if alpha > _ALPHA_MAX:
                        alpha = _ALPHA_MAX
                    if alpha < _ALPHA_MIN:
                        continue
                    w = alpha * t_cur
                    for c in range(channels):
                        out[y, x, c] += payload[r, c] * w
                    t_cur *= 1.0 - alpha
                trans[y, x] = t_cur


@njit(cache=True, parallel=True)
def _backward_entries(tile_entries, tile_start, tiles_x, height, width,
                      means2d, conic, opacity, payload, grad_out, entry_grad):
    channels = payload.shape[1]
    n_tiles = tile_start.shape[0] - 1
    for tile in prange(n_tiles):
        lo, hi = tile_start[tile], tile_start[tile + 1]
        if lo == hi:
            continue
        ty, tx = tile // tiles_x, tile % tiles_x
        y0, x0 = ty * _TILE, tx * _TILE
        y1, x1 = min(height, y0 + _TILE), min(width, x0 + _TILE)
        out_pix = np.empty(channels)
        prefix = np.empty(channels)
        for y in range(y0, y1):
            py = y + 0.5
            for x in range(x0, x1):
                px = x + 0.5
                # walk 1: recompute this pixel's composited output
                for c in range(channels):
                    out_pix[c] = 0.0
                t_cur = 1.0
                for e in range(lo, hi):
                    if t_cur < _T_EPS:
                        break
                    r = tile_entries[e]
                    dx = px - means2d[r, 0]
                    dy = py - means2d[r, 1]
                    power = -0.5 * (conic[r, 0] * dx * dx
                                    + 2.0 * conic[r, 1] * dx * dy
                                    + conic[r, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    alpha = opacity[r] * np.exp(power)
                    if alpha > _ALPHA_MAX:
                        alpha = _ALPHA_MAX
                    if alpha < _ALPHA_MIN:
                        continue
                    w = alpha * t_cur
                    for c in range(channels):
                        out_pix[c] += payload[r, c] * w
                    t_cur *= 1.0 - alpha
                # walk 2: per-fragment partials
                for c in range(channels):
                    prefix[c] = 0.0
                t_cur = 1.0
                for e in range(lo, hi):
                    if t_cur < _T_EPS:
                        break
                    r = tile_entries[e]
                    dx = px - means2d[r, 0]
                    dy = py - means2d[r, 1]
                    power = -0.5 * (conic[r, 0] * dx * dx
                                    + 2.0 * conic[r, 1] * dx * dy
                                    + conic[r, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    gauss = np.exp(power)
                    raw = opacity[r] * gauss
                    alpha = raw
                    if alpha > _ALPHA_MAX:
                        alpha = _ALPHA_MAX
                    if alpha < _ALPHA_MIN:
                        continue
                    w = alpha * t_cur
                    d_alpha = 0.0
                    for c in range(channels):
                        gc = grad_out[y, x, c]
                        pc = payload[r, c]
                        entry_grad[e, c] += gc * w
                        prefix[c] += pc * w
                        d_alpha += gc * (pc * t_cur
                                         - (out_pix[c] - prefix[c]) / (1.0 - alpha))
                    if raw < _ALPHA_MAX:
                        entry_grad[e, channels] += d_alpha * gauss
                    t_cur *= 1.0 - alpha


@njit(cache=True)
def _merge_entries(tile_entries, entry_grad, payload_grad, opacity_grad):
    channels = payload_grad.shape[1]
    for e in range(tile_entries.shape[0]):
        r = tile_entries[e]
        for c in range(channels):
            payload_grad[r, c] += entry_grad[e, c]
        opacity_grad[r] += entry_grad[e, channels]


def composite_forward(tile_entries, tile_start, tiles_x, height, width,
                      means2d, conic, opacity, payload):
    """Front-to-back alpha compositing of one payload matrix.

    Returns (out (H,W,C), transmittance (H,W)).
    """
    out = np.zeros((height, width, payload.shape[1]))
    trans = np.ones((height, width))
    _forward(tile_entries, tile_start, tiles_x, height, width,
             means2d, conic, opacity, payload, out, trans)
    return out, trans


def composite_backward(tile_entries, tile_start, tiles_x, height, width,
                       means2d, conic, opacity, payload, grad_out):
    """Gradients of composite_forward wrt payload rows and activated opacity.

    Returns (payload_grad (v,C), opacity_grad (v,)).
    """
    n_visible, channels = payload.shape
    entry_grad = np.zeros((tile_entries.shape[0], channels + 1))
    _backward_entries(tile_entries, tile_start, tiles_x, height, width,
                      means2d, conic, opacity, payload,
                      np.ascontiguousarray(grad_out), entry_grad)
    payload_grad = np.zeros((n_visible, channels))
    opacity_grad = np.zeros(n_visible)
    _merge_entries(tile_entries, entry_grad, payload_grad, opacity_grad)
    return payload_grad, opacity_grad


@njit(cache=True)
def reduce_decide(sim, used, theta, offset, selected_buf):
    """Greedy selection pass over one chunk's similarity block.

    Mutates the usage mask; returns how many rows were selected.
    """
    count = 0
    for j in range(sim.shape[0]):
        gi = offset + j
        if used[gi]:
            continue
        ok = True
        for i in range(sim.shape[1]):
            if sim[j, i] >= theta and used[i]:
                ok = False
                break
        if ok:
            selected_buf[count] = gi
            count += 1
            for i in range(sim.shape[1]):
                if sim[j, i] >= theta:
                    used[i] = 1
    return count
