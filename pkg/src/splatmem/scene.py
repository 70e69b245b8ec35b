"""Gaussian primitives, scenes, cameras, and their binary persistence.

A scene is stored struct-of-arrays for numpy efficiency; ``GaussianPrimitive``
is the per-element view. Opacity is kept as a pre-sigmoid logit and scale as
log standard deviations so optimizer steps stay unconstrained.

On disk (M3GS, little-endian): magic ``M3GS``, version u32, count u32, l u32,
then per primitive 3+4+3+1+3+l float32 (centroid, quaternion, log scale,
opacity logit, sh color, query), then u32 slice-manifest entry count followed
by (u32 name length, UTF-8 name, u32 start, u32 length) per model.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from splatmem.errors import DimensionError, FormatError

MAGIC = b"M3GS"
VERSION = 1

SH_C0 = 0.28209479177387814

_FIXED_FIELDS = 14  # centroid 3 + quaternion 4 + log scale 3 + opacity 1 + sh 3


@dataclass
class GaussianPrimitive:
    """One Gaussian: geometry, appearance, and its principal-query vector."""

    centroid: np.ndarray       # (3,) world units
    rotation: np.ndarray       # (4,) unit quaternion, w first
    log_scale: np.ndarray      # (3,) log of per-axis stddev
    opacity_logit: float       # pre-sigmoid
    color_sh: np.ndarray       # (3,) degree-0 SH coefficients
    query: np.ndarray          # (l,)


@dataclass
class CameraView:
    """Pinhole camera plus the paths of its image and per-model feature maps."""

    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4) rigid transform
    width: int
    height: int
    image_path: str | None = None
    feature_paths: dict[str, str] = field(default_factory=dict)

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image dimensions must be positive")
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        rot = w2c[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5):
            raise ValueError("rotation block of world_to_camera is not orthonormal")
        return self


class GaussianScene:
    """Ordered set of Gaussian primitives with named query-vector slices."""

    def __init__(self, centroids, rotations, log_scales, opacity_logits,
                 color_sh, queries, model_slices):
        self.centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(rotations, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).ravel()
        self.color_sh = np.atleast_2d(np.asarray(color_sh, dtype=np.float64))
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim == 1:
            queries = queries.reshape(len(self.centroids), -1)
        self.queries = queries
        self.model_slices = dict(model_slices)  # name -> (start, length)
        self.normalize_rotations()
        self.validate()

    # -- invariants ------------------------------------------------------

    def normalize_rotations(self):
        """Bring quaternions to unit norm; rows already within 1e-6 stay
        untouched so a load/save cycle is bit-exact."""
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-norm quaternion")
        off = np.abs(norms - 1.0) >= 1e-6
        if off.any():
            self.rotations = np.where(off, self.rotations / norms, self.rotations)

    def validate(self):
        n = len(self.centroids)
        if n == 0:
            raise ValueError("empty scene")
        shapes = (self.centroids.shape, self.rotations.shape, self.log_scales.shape,
                  self.color_sh.shape)
        if shapes != ((n, 3), (n, 4), (n, 3), (n, 3)) or self.opacity_logits.shape != (n,):
            raise ValueError(f"inconsistent field shapes: {shapes}")
        if self.queries.shape[0] != n:
            raise ValueError("query row count does not match primitive count")
        self.validate_slices()
        return self

    def validate_slices(self):
        """Slices must be disjoint, contiguous, and cover [0, l) exactly."""
        l = self.queries.shape[1]
        spans = sorted((start, start + length) for start, length in self.model_slices.values())
        cursor = 0
        for start, stop in spans:
            if start != cursor or stop <= start:
                raise ValueError(
                    f"model slices must tile [0, {l}) contiguously, got {self.model_slices}")
            cursor = stop
        if cursor != l:
            raise ValueError(
                f"model slices cover [0, {cursor}) but query length is {l}")

    # -- accessors -------------------------------------------------------

    def __len__(self):
        return len(self.centroids)

    @property
    def query_length(self):
        return self.queries.shape[1]

    def query_slice(self, model):
        start, length = self.model_slices[model]
        return slice(start, start + length)

    def primitive(self, i):
        return GaussianPrimitive(
            centroid=self.centroids[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color_sh=self.color_sh[i].copy(),
            query=self.queries[i].copy(),
        )

    @classmethod
    def from_primitives(cls, primitives, model_slices):
        if not primitives:
            raise ValueError("empty scene")
        return cls(
            centroids=np.stack([p.centroid for p in primitives]),
            rotations=np.stack([p.rotation for p in primitives]),
            log_scales=np.stack([p.log_scale for p in primitives]),
            opacity_logits=np.array([p.opacity_logit for p in primitives]),
            color_sh=np.stack([p.color_sh for p in primitives]),
            queries=np.stack([p.query for p in primitives]),
            model_slices=model_slices,
        )

    # -- derived quantities ----------------------------------------------

    def opacities(self):
        """Activated opacity in (0, 1)."""
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def scales(self):
        return np.exp(self.log_scales)

    def colors(self):
        """RGB payload fed to the compositor (degree-0 SH evaluation)."""
        return SH_C0 * self.color_sh + 0.5


def rotation_matrices(quaternions):
    """Batch quaternion (w, x, y, z) to rotation matrix."""
    q = np.asarray(quaternions, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=1)


# -- persistence -----------------------------------------------------------


def save_scene(scene: GaussianScene, path) -> None:
    """Write a scene; load_scene reproduces it bit-exactly at float32."""
    scene.validate()
    n, l = len(scene), scene.query_length
    block = np.empty((n, _FIXED_FIELDS + l), dtype="<f4")
    block[:, 0:3] = scene.centroids
    block[:, 3:7] = scene.rotations
    block[:, 7:10] = scene.log_scales
    block[:, 10] = scene.opacity_logits
    block[:, 11:14] = scene.color_sh
    block[:, 14:] = scene.queries
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, n, l))
        fh.write(block.tobytes())
        fh.write(struct.pack("<I", len(scene.model_slices)))
        for name, (start, length) in scene.model_slices.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", start, length))


def load_scene(path) -> GaussianScene:
    """Read an M3GS file, preserving primitive order exactly."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not an M3GS file")
    version, n, l = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported M3GS version {version}")
    if n == 0:
        raise FormatError(f"{path}: empty scene")
    row = _FIXED_FIELDS + l
    body = 16 + n * row * 4
    if len(data) < body + 4:
        raise DimensionError(
            f"{path}: primitive block needs {n}x{row} float32 fields, file too short")
    block = np.frombuffer(data, dtype="<f4", count=n * row, offset=16)
    block = block.reshape(n, row).astype(np.float64)
    off = body
    (n_models,) = struct.unpack_from("<I", data, off)
    off += 4
    slices = {}
    try:
        for _ in range(n_models):
            (name_len,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + name_len].decode("utf-8")
            off += name_len
            start, length = struct.unpack_from("<II", data, off)
            off += 8
            slices[name] = (start, length)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated slice manifest") from exc
    try:
        return GaussianScene(
            centroids=block[:, 0:3],
            rotations=block[:, 3:7],
            log_scales=block[:, 7:10],
            opacity_logits=block[:, 10],
            color_sh=block[:, 11:14],
            queries=block[:, 14:],
            model_slices=slices,
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def init_scene_from_points(points, colors, query_length, model_slices=None) -> GaussianScene:
    """Seed one primitive per point.

    Scale starts at the mean nearest-neighbor distance (isotropic), opacity
    at logit(0.1), rotation at identity, queries at zero.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cols = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    n = len(pts)
    if n == 0:
        raise ValueError("empty point list")
    if cols.shape != (n, 3) or pts.shape != (n, 3):
        raise ValueError("points and colors must both be (n, 3)")
    if n == 1:
        mean_nn = 1.0
    else:
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        mean_nn = float(np.mean(np.sqrt(d2.min(axis=1))))
    if model_slices is None:
        model_slices = {"default": (0, query_length)} if query_length else {}
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianScene(
        centroids=pts,
        rotations=rot,
        log_scales=np.full((n, 3), np.log(mean_nn)),
        opacity_logits=np.full(n, np.log(0.1 / 0.9)),
        color_sh=(cols - 0.5) / SH_C0,
        queries=np.zeros((n, query_length)),
        model_slices=model_slices,
    )
