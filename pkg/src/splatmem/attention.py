"""Softmax attention from rasterized query vectors onto the memory bank.

Per pixel: logits z = (q . W_m) . PSC^T, scaled per temperature mode,
weights = softmax(z), output = weights . PSC. The bank rows are frozen;
gradients flow to the queries and the projection only.

The two matmul orders (project-then-score vs. scoring against the
materialized W_m PSC^T) are mathematically identical; a flop-count model
picks the cheaper one and only materializes the (s, t) product when it is
small. Softmax always subtracts the row max before exponentiation.
"""

from dataclasses import dataclass

import numpy as np

from splatmem.memory import MemoryBank

TEMPERATURE_MODES = ("none", "inv_sqrt_d", "scalar")

# never materialize W_m @ PSC^T above this many entries
_MATERIALIZE_LIMIT = 1 << 22


@dataclass
class AttentionOutput:
    rendered_features: np.ndarray        # (..., d)
    attention_weights: np.ndarray | None  # (..., t) when tracing is requested


def _scale(bank: MemoryBank, temperature_mode, scale):
    if temperature_mode not in TEMPERATURE_MODES:
        raise ValueError(f"unknown temperature mode {temperature_mode!r}")
    if temperature_mode == "none":
        return 1.0
    if temperature_mode == "inv_sqrt_d":
        return 1.0 / np.sqrt(bank.dim)
    if scale is None:
        raise ValueError("temperature mode 'scalar' needs an explicit scale")
    return float(scale)


def _check_query(query, bank):
    q = np.asarray(query, dtype=np.float64)
    if bank.w_m is None:
        raise ValueError("bank projection not initialized")
    if q.shape[-1] != bank.degree:
        raise ValueError(
            f"query width {q.shape[-1]} != projection rows {bank.degree}")
    if not np.isfinite(q).all():
        raise ValueError("non-finite query input")
    return q


def _use_materialized(n_pixels, s, t, d):
    if s * t > _MATERIALIZE_LIMIT:
        return False
    return s * d * t + n_pixels * s * t < n_pixels * d * (s + t)


def _logits(flat_q, bank, tau):
    psc = bank.psc.astype(np.float64)
    if _use_materialized(len(flat_q), bank.degree, bank.size, bank.dim):
        return tau * (flat_q @ (bank.w_m @ psc.T))
    return tau * ((flat_q @ bank.w_m) @ psc.T)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    return w


def attend(query_map, bank: MemoryBank, temperature_mode="inv_sqrt_d",
           scale=None, keep_weights=False) -> AttentionOutput:
    """Reconstruct full-dimensional features for every query vector.

    query_map may have any leading shape (h, w, s), (P, s), or (s,).
    """
    q = _check_query(query_map, bank)
    tau = _scale(bank, temperature_mode, scale)
    lead = q.shape[:-1]
    flat = q.reshape(-1, q.shape[-1])
    weights = _softmax(_logits(flat, bank, tau))
    out = weights @ bank.psc.astype(np.float64)
    return AttentionOutput(
        rendered_features=out.reshape(*lead, bank.dim),
        attention_weights=weights.reshape(*lead, bank.size) if keep_weights else None,
    )


def attend_backward(query_map, bank: MemoryBank, upstream,
                    temperature_mode="inv_sqrt_d", scale=None):
    """Gradients of attend wrt the query map and the projection.

    Returns (grad_query with query_map's shape, grad_w_m (s, d)). The bank
    rows receive no gradient.
    """
    q = _check_query(query_map, bank)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != q.shape[:-1] + (bank.dim,):
        raise ValueError(f"upstream gradient shape {g.shape} mismatch")
    tau = _scale(bank, temperature_mode, scale)
    lead = q.shape[:-1]
    flat_q = q.reshape(-1, q.shape[-1])
    flat_g = g.reshape(-1, bank.dim)
    psc = bank.psc.astype(np.float64)

    weights = _softmax(_logits(flat_q, bank, tau))
    d_weights = flat_g @ psc.T
    inner = (d_weights * weights).sum(axis=1, keepdims=True)
    d_logits = tau * weights * (d_weights - inner)

    d_proj = d_logits @ psc              # gradient wrt (q . W_m), (P, d)
    grad_q = d_proj @ bank.w_m.T
    grad_w = flat_q.T @ d_proj
    return grad_q.reshape(q.shape), grad_w


def trace_top_k(query_vector, bank: MemoryBank, k: int,
                temperature_mode="inv_sqrt_d", scale=None):
    """Strongest bank rows for one query: (row index, weight, source row).

    Sorted by descending weight, ties broken toward the lower index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > bank.size:
        raise ValueError(f"k={k} exceeds bank size {bank.size}")
    out = attend(np.asarray(query_vector, dtype=np.float64).reshape(1, -1),
                 bank, temperature_mode, scale, keep_weights=True)
    weights = out.attention_weights[0]
    order = np.lexsort((np.arange(bank.size), -weights))[:k]
    return [(int(i), float(weights[i]), int(bank.selected_indices[i])) for i in order]
