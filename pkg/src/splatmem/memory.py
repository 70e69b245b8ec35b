"""Deduplicated feature memory: build, initialize, persist.

The bank keeps an exact subset of the raw feature rows: rows are visited in
global index order, and an unused row is selected only when every row
cosine-similar to it (>= theta, on L2-normalized rows) is still unused;
selection then marks that whole similar set used. Chunking batches the
similarity matmul only -- the decision order, and therefore the output, is
identical for every chunk size. Unlike a floor(n/c)-bounded chunk loop, the
final partial chunk is processed too, so all n rows take part.

On disk (M3PB, little-endian): magic ``M3PB``, version u32, name (u32 length
+ UTF-8), t, d, s u32, theta f32, source indices u32[t], bank rows f32[t*d],
projection f32[s*d].
"""

import struct
from dataclasses import dataclass

import numpy as np

from splatmem import backend
from splatmem.errors import DimensionError, FormatError

MAGIC = b"M3PB"
VERSION = 1

DEFAULT_THETA = 0.9
DEFAULT_CHUNK = 1024


@dataclass
class FeatureTensor:
    """Dense per-view feature maps, flattened to (n_views*h*w, d) rows."""

    model_name: str
    n_views: int
    height: int
    width: int
    data: np.ndarray  # (n_views*h*w, d) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[1] == 0:
            raise ValueError("feature data must be (rows, d) with d > 0")
        expected = self.n_views * self.height * self.width
        if self.data.shape[0] != expected:
            raise ValueError(
                f"row count {self.data.shape[0]} != n*h*w = {expected}")
        if not np.isfinite(self.data).all():
            raise ValueError("feature data contains NaN/Inf")

    @property
    def dim(self):
        return self.data.shape[1]

    def view(self, i):
        """Feature map of view i as (h, w, d)."""
        rows = self.height * self.width
        return self.data[i * rows:(i + 1) * rows].reshape(self.height, self.width, -1)


@dataclass
class MemoryBank:
    """Per-model memory: selected feature rows plus the learnable projection."""

    model_name: str
    psc: np.ndarray                 # (t, d) float32, exact copies of source rows
    selected_indices: np.ndarray    # (t,) source row indices, ascending
    theta: float
    w_m: np.ndarray | None = None   # (s, d) float64 while training

    def __post_init__(self):
        self.psc = np.ascontiguousarray(self.psc, dtype=np.float32)
        self.selected_indices = np.asarray(self.selected_indices, dtype=np.int64)
        if self.psc.ndim != 2 or len(self.psc) < 1:
            raise ValueError("bank must hold at least one row")
        if len(self.selected_indices) != len(self.psc):
            raise ValueError("index count does not match bank rows")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if self.w_m is not None:
            self.w_m = np.asarray(self.w_m, dtype=np.float64)
            if self.w_m.ndim != 2 or self.w_m.shape[1] != self.psc.shape[1]:
                raise ValueError("projection shape must be (s, d)")
            if not np.isfinite(self.w_m).all():
                raise ValueError("projection contains NaN/Inf")

    @property
    def size(self):
        return len(self.psc)

    @property
    def dim(self):
        return self.psc.shape[1]

    @property
    def degree(self):
        if self.w_m is None:
            raise ValueError("projection not initialized")
        return self.w_m.shape[0]


def reduce_similarity(raw: FeatureTensor, theta: float = DEFAULT_THETA,
                      chunk: int = DEFAULT_CHUNK) -> MemoryBank:
    """Greedy similarity reduction of the raw rows into a bank.

    The projection is left unset; call init_projection afterwards.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    rows = raw.data
    n = len(rows)
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"zero-norm feature row at index {bad[0]}")
    unit = rows.astype(np.float64) / norms[:, None]

    used = np.zeros(n, dtype=np.uint8)
    selected = []
    buf = np.empty(min(chunk, n), dtype=np.int64)
    for offset in range(0, n, chunk):
        block = unit[offset:offset + chunk]
        sim = block @ unit.T
        count = backend.reduce_decide(sim, used, theta, offset, buf)
        selected.extend(buf[:count].tolist())
    indices = np.array(sorted(selected), dtype=np.int64)
    return MemoryBank(
        model_name=raw.model_name,
        psc=rows[indices].copy(),
        selected_indices=indices,
        theta=theta,
    )


def init_projection(bank: MemoryBank, degree: int, seed: int) -> MemoryBank:
    """Attach a Normal(0, 1/sqrt(d)) projection drawn from the seeded rng."""
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    rng = np.random.default_rng(seed)
    bank.w_m = rng.normal(0.0, 1.0 / np.sqrt(bank.dim), size=(degree, bank.dim))
    return bank


def save_bank(bank: MemoryBank, path) -> None:
    if bank.w_m is None:
        raise ValueError("cannot save a bank without its projection")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        raw = bank.model_name.encode("utf-8")
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<IIIf", bank.size, bank.dim, bank.degree, bank.theta))
        fh.write(bank.selected_indices.astype("<u4").tobytes())
        fh.write(bank.psc.astype("<f4").tobytes())
        fh.write(bank.w_m.astype("<f4").tobytes())


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not an M3PB file")
    version, name_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported M3PB version {version}")
    off = 12
    name = data[off:off + name_len].decode("utf-8")
    off += name_len
    try:
        t, d, s, theta = struct.unpack_from("<IIIf", data, off)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    off += 16
    need = off + 4 * t + 4 * t * d + 4 * s * d
    if len(data) < need:
        raise DimensionError(f"{path}: expected {need} bytes, file has {len(data)}")
    indices = np.frombuffer(data, dtype="<u4", count=t, offset=off).astype(np.int64)
    off += 4 * t
    psc = np.frombuffer(data, dtype="<f4", count=t * d, offset=off).reshape(t, d)
    off += 4 * t * d
    w_m = np.frombuffer(data, dtype="<f4", count=s * d, offset=off).reshape(s, d)
    try:
        return MemoryBank(model_name=name, psc=psc.copy(), selected_indices=indices,
                          theta=float(theta), w_m=w_m.astype(np.float64))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
