"""Feature-map visualization helpers.

PCA drives the false-color view: deterministic (sign fixed by forcing each
component's coefficient sum positive), with degenerate components mapped to
flat 0.5 gray. The query heatmap is a red overlay whose strength is the
per-image min-max normalized similarity.
"""

import numpy as np

_DEGENERATE = 1e-12


def pca_visualize(feature_map):
    """Project an (h, w, d) map onto its top 3 principal axes as RGB in [0, 1]."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3 or fm.shape[2] < 3:
        raise ValueError("PCA visualization needs an (h, w, d) map with d >= 3")
    h, w, d = fm.shape
    flat = fm.reshape(-1, d)
    centered = flat - flat.mean(axis=0)
    out = np.full((h * w, 3), 0.5)
    scale = np.abs(centered).max()
    if scale > _DEGENERATE:
        _, svals, vt = np.linalg.svd(centered, full_matrices=False)
        for c in range(3):
            if svals[c] <= _DEGENERATE * svals[0]:
                continue
            comp = vt[c]
            if comp.sum() < 0:
                comp = -comp
            proj = centered @ comp
            lo, hi = proj.min(), proj.max()
            if hi - lo > _DEGENERATE:
                out[:, c] = (proj - lo) / (hi - lo)
    return out.reshape(h, w, 3)


def heatmap_overlay(rgb, similarity):
    """Blend red into an image proportionally to normalized similarity.

    Returns (overlay image, (row, col) argmax pixel). Ties resolve to the
    first pixel in row-major order; a constant map highlights nothing.
    """
    img = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    sim = np.asarray(similarity, dtype=np.float64)
    if sim.shape != img.shape[:2]:
        raise ValueError(f"similarity shape {sim.shape} != image {img.shape[:2]}")
    lo, hi = sim.min(), sim.max()
    weight = (sim - lo) / (hi - lo) if hi - lo > _DEGENERATE else np.zeros_like(sim)
    red = np.zeros_like(img)
    red[:, :, 0] = 1.0
    overlay = img * (1.0 - weight[:, :, None]) + red * weight[:, :, None]
    argmax = np.unravel_index(int(np.argmax(sim)), sim.shape)
    return overlay, (int(argmax[0]), int(argmax[1]))
