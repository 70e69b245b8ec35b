"""Low-level and high-level evaluation metrics.

Feature distances follow one fixed convention: cosine distance is the
per-pixel mean of (1 - cos), L2 is the per-pixel mean of the squared
difference summed over the channel axis. Grounding labels every pixel with
its argmax-similarity query; retrieval ranks by cosine similarity with ties
broken toward the lower index.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_EPS = 1e-8

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _check_same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# -- feature distances -------------------------------------------------------


def cosine_l2_maps(pred, gt):
    """Mean cosine distance and mean per-pixel squared L2 over a feature map."""
    pred, gt = _check_same_shape(pred, gt)
    p = pred.reshape(-1, pred.shape[-1])
    g = gt.reshape(-1, gt.shape[-1])
    pn = np.maximum(np.linalg.norm(p, axis=1), _EPS)
    gn = np.maximum(np.linalg.norm(g, axis=1), _EPS)
    cos = np.clip((p * g).sum(axis=1) / (pn * gn), -1.0, 1.0)
    l2 = ((p - g) ** 2).sum(axis=1)
    return float(np.mean(1.0 - cos)), float(np.mean(l2))


# -- image quality -----------------------------------------------------------


def psnr(img_a, img_b):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    a, b = _check_same_shape(img_a, img_b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


def _gauss_1d():
    x = np.arange(WINDOW_SIZE) - (WINDOW_SIZE - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * WINDOW_SIGMA ** 2))
    return g / g.sum()

_KERNEL = _gauss_1d()


def _filter(img):
    """Separable 11x11 Gaussian, zero-padded 'same' convolution."""
    pad = WINDOW_SIZE // 2
    tmp = np.pad(img, ((0, 0), (pad, pad)))
    tmp = sliding_window_view(tmp, WINDOW_SIZE, axis=1) @ _KERNEL
    tmp = np.pad(tmp, ((pad, pad), (0, 0)))
    return sliding_window_view(tmp, WINDOW_SIZE, axis=0) @ _KERNEL


def _ssim_stats(x, y):
    mu_x, mu_y = _filter(x), _filter(y)
    sxx = _filter(x * x) - mu_x * mu_x
    syy = _filter(y * y) - mu_y * mu_y
    sxy = _filter(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + _C1
    a2 = 2.0 * sxy + _C2
    b1 = mu_x * mu_x + mu_y * mu_y + _C1
    b2 = sxx + syy + _C2
    return mu_x, mu_y, a1, a2, b1, b2


def _channels(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    return img


def ssim(img_a, img_b):
    """Mean structural similarity (11x11 Gaussian window, standard constants)."""
    a, b = _check_same_shape(img_a, img_b)
    a, b = _channels(a), _channels(b)
    total = 0.0
    for c in range(a.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_stats(a[:, :, c], b[:, :, c])
        total += float(np.mean(a1 * a2 / (b1 * b2)))
    return total / a.shape[2]


def ssim_with_grad(pred, gt):
    """Mean SSIM and its gradient wrt pred (the training side)."""
    p, g = _check_same_shape(pred, gt)
    p, g = _channels(p), _channels(g)
    n_chan = p.shape[2]
    n_pix = p.shape[0] * p.shape[1]
    total = 0.0
    grad = np.zeros_like(p)
    for c in range(n_chan):
        x, y = p[:, :, c], g[:, :, c]
        mu_x, mu_y, a1, a2, b1, b2 = _ssim_stats(x, y)
        s_map = a1 * a2 / (b1 * b2)
        total += float(np.mean(s_map))
        d_mu = 2.0 * mu_y * a2 / (b1 * b2) - 2.0 * mu_x * s_map / b1
        d_sxx = -s_map / b2
        d_sxy = 2.0 * a1 / (b1 * b2)
        grad_c = (_filter(d_mu - 2.0 * mu_x * d_sxx - mu_y * d_sxy)
                  + 2.0 * x * _filter(d_sxx) + y * _filter(d_sxy))
        grad[:, :, c] = grad_c / (n_pix * n_chan)
    if pred.ndim == 2:
        grad = grad[:, :, 0]
    return total / n_chan, grad


# -- retrieval ---------------------------------------------------------------


@dataclass
class RetrievalSet:
    """Aligned image/text embeddings; pair i is the positive for index i."""

    image_embeddings: np.ndarray  # (m, d)
    text_embeddings: np.ndarray   # (m, d)
    pooling: str = "mean"         # how maps were pooled into image embeddings

    def __post_init__(self):
        self.image_embeddings = np.asarray(self.image_embeddings, dtype=np.float64)
        self.text_embeddings = np.asarray(self.text_embeddings, dtype=np.float64)
        if self.image_embeddings.shape != self.text_embeddings.shape:
            raise ValueError("image/text embedding shapes differ")
        if len(self.image_embeddings) < 2:
            raise ValueError("retrieval needs at least 2 pairs")
        if not (np.isfinite(self.image_embeddings).all()
                and np.isfinite(self.text_embeddings).all()):
            raise ValueError("embeddings contain NaN/Inf")

    @property
    def size(self):
        return len(self.image_embeddings)


def pool_feature_map(feature_map, mode="mean"):
    """Turn an (h, w, d) map into one embedding row."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if mode == "mean":
        return fm.reshape(-1, fm.shape[-1]).mean(axis=0)
    if mode == "center_crop_mean":
        h, w = fm.shape[:2]
        return fm[h // 4:h - h // 4 or h, w // 4:w - w // 4 or w].reshape(
            -1, fm.shape[-1]).mean(axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


def _unit_rows(x):
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _EPS)


def retrieval_at_k(rset: RetrievalSet, ks=(1, 5, 10)):
    """Image-to-text and text-to-image recall percentages at each cutoff."""
    m = rset.size
    for k in ks:
        if not 1 <= k <= m:
            raise ValueError(f"k={k} out of range for {m} pairs")
    sim = _unit_rows(rset.image_embeddings) @ _unit_rows(rset.text_embeddings).T
    diag = np.diag(sim)
    idx = np.arange(m)

    # rank of the positive among candidates, ties won by the lower index
    def ranks(matrix, positives):
        better = matrix > positives[:, None]
        equal = matrix == positives[:, None]
        tie_wins = equal & (idx[None, :] < idx[:, None])
        return better.sum(axis=1) + tie_wins.sum(axis=1)

    i2t = ranks(sim, diag)
    t2i = ranks(sim.T, diag)
    out = {}
    for k in ks:
        out[f"I2T@{k}"] = 100.0 * int(np.sum(i2t < k)) / m
        out[f"T2I@{k}"] = 100.0 * int(np.sum(t2i < k)) / m
    return out


# -- grounding ---------------------------------------------------------------


@dataclass
class GroundingSet:
    """Query embeddings with their ground-truth binary masks."""

    queries: np.ndarray  # (m, d)
    masks: np.ndarray    # (m, h, w) bool

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=bool)
        if len(self.queries) == 0:
            raise ValueError("empty grounding set")
        if self.masks.ndim != 3 or len(self.masks) != len(self.queries):
            raise ValueError("need one mask per query")
        if not np.isfinite(self.queries).all():
            raise ValueError("queries contain NaN/Inf")
        if not self.masks.any(axis=(1, 2)).all():
            raise ValueError("every mask needs at least one positive pixel")

    @property
    def size(self):
        return len(self.queries)


def grounding_scores(rendered, gset: GroundingSet, thresholds=(0.5, 0.6)):
    """mIoU, cIoU, and AP at the given IoU thresholds.

    Pixels are labeled by the argmax-similarity query (ties toward the
    lower query index); each query's predicted mask is its label region.
    """
    fm = np.asarray(rendered, dtype=np.float64)
    h, w = fm.shape[:2]
    if gset.masks.shape[1:] != (h, w):
        raise ValueError(f"mask dims {gset.masks.shape[1:]} != map dims {(h, w)}")
    flat = fm.reshape(-1, fm.shape[-1])
    sims = _unit_rows(flat) @ _unit_rows(gset.queries).T  # (hw, m)
    labels = sims.argmax(axis=1).reshape(h, w)

    ious = np.empty(gset.size)
    inter_total = 0
    union_total = 0
    for j in range(gset.size):
        pred = labels == j
        gt = gset.masks[j]
        inter = int(np.sum(pred & gt))
        union = int(np.sum(pred | gt))
        ious[j] = inter / union if union else 0.0
        inter_total += inter
        union_total += union

    result = {
        "mIoU": float(ious.mean()),
        "cIoU": inter_total / union_total if union_total else 0.0,
    }
    for tau in thresholds:
        result[f"AP{int(round(tau * 100))}"] = float(np.mean(ious >= tau))
    return result
