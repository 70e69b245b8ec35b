"""Pure-numpy kernels: vectorized over the fragments x pixels block of one tile.

Semantics match ``jitted`` exactly (same clamping, cutoffs and early
termination); floating-point results may differ from the jitted path in the
last bits because numpy reductions reassociate sums. Each path on its own is
deterministic for any worker-thread count.
"""

import numpy as np

_TILE = 16
_ALPHA_MAX = 0.99
_ALPHA_MIN = 1.0 / 255.0
_T_EPS = 1e-4


def _tile_block(tile, tiles_x, height, width):
    ty, tx = divmod(tile, tiles_x)
    y0, x0 = ty * _TILE, tx * _TILE
    return y0, min(height, y0 + _TILE), x0, min(width, x0 + _TILE)


def _alpha_matrix(ranks, means2d, conic, opacity, ys, xs):
    """Per-fragment, per-pixel alpha (k, P); skipped fragments carry 0.

    Also returns the unclamped alpha and the Gaussian falloff factor.
    """
    dx = (xs + 0.5)[None, :] - means2d[ranks, 0][:, None]
    dy = (ys + 0.5)[None, :] - means2d[ranks, 1][:, None]
    ca = conic[ranks, 0][:, None]
    cb = conic[ranks, 1][:, None]
    cc = conic[ranks, 2][:, None]
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    gauss = np.exp(power)
    raw = opacity[ranks][:, None] * gauss
    alpha = np.minimum(raw, _ALPHA_MAX)
    alpha[(power > 0.0) | (alpha < _ALPHA_MIN)] = 0.0
    return alpha, raw, gauss


def composite_forward(tile_entries, tile_start, tiles_x, height, width,
                      means2d, conic, opacity, payload):
    """Front-to-back alpha compositing of one payload matrix.

    Returns (out (H,W,C), transmittance (H,W)).
    """
    channels = payload.shape[1]
    out = np.zeros((height, width, channels))
    trans = np.ones((height, width))
    for tile in range(len(tile_start) - 1):
        lo, hi = tile_start[tile], tile_start[tile + 1]
        if lo == hi:
            continue
        y0, y1, x0, x1 = _tile_block(tile, tiles_x, height, width)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        ys, xs = ys.ravel().astype(np.float64), xs.ravel().astype(np.float64)
        ranks = tile_entries[lo:hi]
        alpha, _, _ = _alpha_matrix(ranks, means2d, conic, opacity, ys, xs)
        t_excl = np.cumprod(1.0 - alpha, axis=0)
        t_excl = np.vstack([np.ones((1, alpha.shape[1])), t_excl[:-1]])
        active = (t_excl >= _T_EPS) & (alpha > 0.0)
        weight = np.where(active, alpha * t_excl, 0.0)
        block = weight.T @ payload[ranks]
        out[y0:y1, x0:x1] = block.reshape(y1 - y0, x1 - x0, channels)
        t_final = np.prod(np.where(active, 1.0 - alpha, 1.0), axis=0)
        trans[y0:y1, x0:x1] = t_final.reshape(y1 - y0, x1 - x0)
    return out, trans


def composite_backward(tile_entries, tile_start, tiles_x, height, width,
                       means2d, conic, opacity, payload, grad_out):
    """Gradients of composite_forward wrt payload rows and activated opacity.

    Returns (payload_grad (v,C), opacity_grad (v,)). Per-entry partials are
    merged in fixed entry order, keeping results thread-count invariant.
    """
    n_visible, channels = payload.shape
    entry_grad = np.zeros((len(tile_entries), channels + 1))
    for tile in range(len(tile_start) - 1):
        lo, hi = tile_start[tile], tile_start[tile + 1]
        if lo == hi:
            continue
        y0, y1, x0, x1 = _tile_block(tile, tiles_x, height, width)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        ys, xs = ys.ravel().astype(np.float64), xs.ravel().astype(np.float64)
        ranks = tile_entries[lo:hi]
        alpha, raw, gauss = _alpha_matrix(ranks, means2d, conic, opacity, ys, xs)
        t_excl = np.cumprod(1.0 - alpha, axis=0)
        t_excl = np.vstack([np.ones((1, alpha.shape[1])), t_excl[:-1]])
        active = (t_excl >= _T_EPS) & (alpha > 0.0)
        weight = np.where(active, alpha * t_excl, 0.0)          # (k, P)
        pay = payload[ranks]                                    # (k, C)
        gout = grad_out[y0:y1, x0:x1].reshape(-1, channels)     # (P, C)

        contrib = weight[:, :, None] * pay[:, None, :]          # (k, P, C)
        total = contrib.sum(axis=0)                             # (P, C)
        suffix = total[None] - np.cumsum(contrib, axis=0)       # (k, P, C)

        entry_grad[lo:hi, :channels] = weight @ gout
        d_alpha = np.einsum(
            "pc,kpc->kp",
            gout,
            pay[:, None, :] * t_excl[:, :, None] - suffix / (1.0 - alpha)[:, :, None],
        )
        # alpha = min(raw, max); clamped fragments get zero opacity gradient
        d_opacity = np.where(active & (raw < _ALPHA_MAX), d_alpha * gauss, 0.0)
        entry_grad[lo:hi, channels] = d_opacity.sum(axis=1)

    payload_grad = np.zeros((n_visible, channels))
    opacity_grad = np.zeros(n_visible)
    np.add.at(payload_grad, tile_entries, entry_grad[:, :channels])
    np.add.at(opacity_grad, tile_entries, entry_grad[:, channels])
    return payload_grad, opacity_grad


def reduce_decide(sim, used, theta, offset, selected_buf):
    """Greedy selection pass over one chunk's similarity block.

    sim: (k, n) similarities of chunk rows against all rows. used: (n,) uint8
    usage mask, mutated in place. Fills selected_buf with chosen global row
    indices; returns how many were chosen.
    """
    count = 0
    for j in range(sim.shape[0]):
        gi = offset + j
        if used[gi]:
            continue
        similar = sim[j] >= theta
        if used[similar].any():
            continue
        selected_buf[count] = gi
        count += 1
        used[similar] = 1
    return count
