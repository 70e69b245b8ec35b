"""Differentiable forward/backward splatting of RGB and query channels.

Projection follows the standard EWA recipe: camera-space covariance
J W Sigma W^T J^T with a +0.3 px^2 low-pass, global (not per-tile) depth
sort, 16x16 pixel tiles. Compositing is front-to-back alpha blending with
per-fragment alpha clamped to 0.99, fragments below 1/255 skipped, and
early termination once transmittance drops under 1e-4.

Payloads (colors, query vectors) enter the blend linearly, so their
gradients share one code path; opacity gradients come from the same walk.
Geometry (means/scales/rotations) is not differentiated: training freezes
it after the appearance phase. GRADIENT_CHANNELS lists what backward
supports.
"""

from dataclasses import dataclass

import numpy as np

from splatmem import backend
from splatmem.backend import ALPHA_MAX, ALPHA_MIN, LOWPASS, NEAR_PLANE, R_CUT, T_EPS, TILE
from splatmem.scene import SH_C0, CameraView, GaussianScene, rotation_matrices

GRADIENT_CHANNELS = ("color", "opacity", "query")

# Toggles the sorted-input contract check in composite_pixel.
DEBUG_CHECKS = True


@dataclass
class SplatFragment:
    """A Gaussian projected to the image plane."""

    gaussian_index: int
    mean2d: np.ndarray      # (2,) pixel coordinates
    cov2d: np.ndarray       # (2, 2) pixel-space covariance, low-passed
    depth: float            # camera-space z
    alpha: float            # per-pixel alpha; project() fills the peak value


@dataclass
class RenderOutput:
    rgb: np.ndarray | None        # (h, w, 3)
    query_map: np.ndarray | None  # (h, w, k)
    alpha_map: np.ndarray         # (h, w) accumulated opacity


@dataclass
class RenderGradients:
    color_sh: np.ndarray | None   # (n, 3)
    opacity_logit: np.ndarray     # (n,)
    query: np.ndarray | None      # (n, k) for the rendered slice


def _camera_space(scene, camera):
    w2c = np.asarray(camera.world_to_camera, dtype=np.float64)
    return scene.centroids @ w2c[:3, :3].T + w2c[:3, 3]


def _cov2d_batch(scene, camera, cam_pts):
    """Projected 2x2 covariances as (a, b, c) triples, plus screen means."""
    w2c = np.asarray(camera.world_to_camera, dtype=np.float64)
    rot_w2c = w2c[:3, :3]
    tx, ty, tz = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]

    # clamp the lateral extent used for the Jacobian to 1.3x the frustum
    lim_x = 1.3 * (camera.width / (2.0 * camera.fx))
    lim_y = 1.3 * (camera.height / (2.0 * camera.fy))
    cx = np.clip(tx / tz, -lim_x, lim_x) * tz
    cy = np.clip(ty / tz, -lim_y, lim_y) * tz

    n = len(cam_pts)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / tz
    jac[:, 0, 2] = -camera.fx * cx / (tz * tz)
    jac[:, 1, 1] = camera.fy / tz
    jac[:, 1, 2] = -camera.fy * cy / (tz * tz)

    rots = rotation_matrices(scene.rotations)
    scales = scene.scales()
    rs = rots * scales[:, None, :]
    cov3d = rs @ rs.transpose(0, 2, 1)

    t = jac @ rot_w2c
    cov2d = t @ cov3d @ t.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    means2d = np.stack([camera.fx * tx / tz + camera.cx,
                        camera.fy * ty / tz + camera.cy], axis=-1)
    return means2d, np.stack([cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]], axis=-1)


class ViewGeometry:
    """Depth-sorted visible fragments of one (scene, camera) pair, tile-binned.

    Arrays are indexed by depth rank; ``order`` maps rank back to the
    primitive index. Geometry only: payloads are supplied per render call.
    """

    def __init__(self, scene: GaussianScene, camera: CameraView):
        camera.validate()
        cam_pts = _camera_space(scene, camera)
        depth = cam_pts[:, 2]
        opacity = scene.opacities()
        visible = (depth > NEAR_PLANE) & (opacity >= ALPHA_MIN)

        height, width = camera.height, camera.width
        self.height, self.width = height, width
        self.tiles_x = (width + TILE - 1) // TILE
        self.tiles_y = (height + TILE - 1) // TILE
        n_tiles = self.tiles_x * self.tiles_y

        if visible.any():
            means2d, cov = _cov2d_batch(scene, camera, cam_pts)
            det = cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2
            visible &= det > 0
        idx = np.flatnonzero(visible)
        if idx.size == 0:
            self.order = np.empty(0, dtype=np.int64)
            self.means2d = np.empty((0, 2))
            self.conic = np.empty((0, 3))
            self.opacity = np.empty(0)
            self.depth = np.empty(0)
            self.tile_entries = np.empty(0, dtype=np.int64)
            self.tile_start = np.zeros(n_tiles + 1, dtype=np.int64)
            return

        order = idx[np.argsort(depth[idx], kind="stable")]
        self.order = order
        self.means2d = means2d[order]
        cov = cov[order]
        det = det[order]
        self.conic = np.stack([cov[:, 2] / det, -cov[:, 1] / det, cov[:, 0] / det], axis=-1)
        self.opacity = opacity[order]
        self.depth = depth[order]

        mid = 0.5 * (cov[:, 0] + cov[:, 2])
        disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
        radius = R_CUT * np.sqrt(mid + disc)

        x0 = np.clip(np.floor((self.means2d[:, 0] - radius) / TILE).astype(np.int64),
                     0, self.tiles_x)
        x1 = np.clip(np.floor((self.means2d[:, 0] + radius) / TILE).astype(np.int64) + 1,
                     0, self.tiles_x)
        y0 = np.clip(np.floor((self.means2d[:, 1] - radius) / TILE).astype(np.int64),
                     0, self.tiles_y)
        y1 = np.clip(np.floor((self.means2d[:, 1] + radius) / TILE).astype(np.int64) + 1,
                     0, self.tiles_y)
        counts = np.maximum(x1 - x0, 0) * np.maximum(y1 - y0, 0)

        ranks = np.repeat(np.arange(len(order), dtype=np.int64), counts)
        tiles = np.empty(int(counts.sum()), dtype=np.int64)
        pos = 0
        for r in np.flatnonzero(counts):
            span_x = np.arange(x0[r], x1[r], dtype=np.int64)
            span_y = np.arange(y0[r], y1[r], dtype=np.int64)
            block = (span_y[:, None] * self.tiles_x + span_x[None, :]).ravel()
            tiles[pos:pos + block.size] = block
            pos += block.size

        key = np.lexsort((ranks, tiles))
        self.tile_entries = ranks[key]
        tile_counts = np.bincount(tiles, minlength=n_tiles)
        self.tile_start = np.zeros(n_tiles + 1, dtype=np.int64)
        np.cumsum(tile_counts, out=self.tile_start[1:])

    def forward(self, payload_per_primitive):
        """Composite a (n, C) payload; returns (out (h,w,C), transmittance)."""
        payload = np.ascontiguousarray(payload_per_primitive[self.order], dtype=np.float64)
        return backend.composite_forward(
            self.tile_entries, self.tile_start, self.tiles_x,
            self.height, self.width, self.means2d, self.conic, self.opacity, payload)

    def backward(self, payload_per_primitive, grad_out, n_primitives):
        """Gradients wrt the (n, C) payload and the activated opacity (n,)."""
        payload = np.ascontiguousarray(payload_per_primitive[self.order], dtype=np.float64)
        pg, og = backend.composite_backward(
            self.tile_entries, self.tile_start, self.tiles_x,
            self.height, self.width, self.means2d, self.conic, self.opacity, payload,
            np.asarray(grad_out, dtype=np.float64))
        payload_grad = np.zeros((n_primitives, payload.shape[1]))
        opacity_grad = np.zeros(n_primitives)
        payload_grad[self.order] = pg
        opacity_grad[self.order] = og
        return payload_grad, opacity_grad


# -- public operations ------------------------------------------------------


def project(scene: GaussianScene, index: int, camera: CameraView) -> SplatFragment | None:
    """Project one primitive; None when culled by the near plane."""
    camera.validate()
    cam_pts = _camera_space(scene, camera)
    if cam_pts[index, 2] <= NEAR_PLANE:
        return None
    means2d, cov = _cov2d_batch(scene, camera, cam_pts)
    a, b, c = cov[index]
    return SplatFragment(
        gaussian_index=index,
        mean2d=means2d[index],
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(cam_pts[index, 2]),
        alpha=float(min(scene.opacities()[index], ALPHA_MAX)),
    )


def fragment_alpha(fragment: SplatFragment, pixel_xy) -> float:
    """Alpha of a fragment at a pixel-center coordinate (x, y)."""
    d = np.asarray(pixel_xy, dtype=np.float64) - fragment.mean2d
    inv = np.linalg.inv(fragment.cov2d)
    power = -0.5 * d @ inv @ d
    if power > 0:
        return 0.0
    return float(min(fragment.alpha * np.exp(power), ALPHA_MAX))


def composite_pixel(fragments):
    """Blend depth-sorted fragments; returns (payload vector, transmittance).

    fragments is a list of (alpha, payload, depth) triples already sorted by
    increasing depth; DEBUG_CHECKS rejects unsorted input.
    """
    if not fragments:
        return np.zeros(0), 1.0
    alphas, payloads, depths = [], [], []
    for item in fragments:
        alpha, payload, depth = item
        alphas.append(min(max(float(alpha), 0.0), ALPHA_MAX))
        payloads.append(np.asarray(payload, dtype=np.float64))
        depths.append(float(depth))
    if DEBUG_CHECKS and any(depths[i] > depths[i + 1] for i in range(len(depths) - 1)):
        raise ValueError("fragments must be sorted by increasing depth")
    out = np.zeros_like(payloads[0])
    t_cur = 1.0
    for alpha, payload in zip(alphas, payloads):
        if t_cur < T_EPS:
            break
        if alpha < ALPHA_MIN:
            continue
        out += payload * (alpha * t_cur)
        t_cur *= 1.0 - alpha
    return out, t_cur


def _resolve_query_selection(scene, query):
    """Map a model name / slice / (start, stop) to a concrete slice."""
    if query is None:
        return None
    if isinstance(query, str):
        return scene.query_slice(query)
    if isinstance(query, slice):
        return slice(query.start or 0, scene.query_length if query.stop is None else query.stop)
    start, stop = query
    return slice(start, stop)


def _build_payload(scene, rgb, qsel):
    parts = []
    if rgb:
        parts.append(scene.colors())
    if qsel is not None:
        parts.append(scene.queries[:, qsel])
    if not parts:
        raise ValueError("nothing to render: enable rgb and/or select query channels")
    return np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]


def render_view(scene: GaussianScene, camera: CameraView, *, rgb=True, query=None,
                geometry: ViewGeometry | None = None) -> RenderOutput:
    """Rasterize RGB and/or a slice of query channels.

    query selects channels by model name, slice, or (start, stop); the
    background contributes zeros to every channel.
    """
    qsel = _resolve_query_selection(scene, query)
    geom = geometry if geometry is not None else ViewGeometry(scene, camera)
    payload = _build_payload(scene, rgb, qsel)
    out, trans = geom.forward(payload)
    n_rgb = 3 if rgb else 0
    return RenderOutput(
        rgb=out[:, :, :3] if rgb else None,
        query_map=out[:, :, n_rgb:] if qsel is not None else None,
        alpha_map=1.0 - trans,
    )


def backward_render(scene: GaussianScene, camera: CameraView, *, rgb_grad=None,
                    query_grad=None, query=None,
                    geometry: ViewGeometry | None = None) -> RenderGradients:
    """Analytic gradients for the channels that were rendered forward.

    Pass the upstream gradient maps for rgb and/or the query slice that
    render_view produced; requesting a gradient for an unrendered channel
    (a grad without its matching selection) is a contract violation.
    """
    qsel = _resolve_query_selection(scene, query)
    if rgb_grad is None and query_grad is None:
        raise ValueError("no upstream gradients supplied")
    if (query_grad is None) != (qsel is None):
        raise ValueError("query gradient requires the query selection rendered forward")
    geom = geometry if geometry is not None else ViewGeometry(scene, camera)

    grads = []
    if rgb_grad is not None:
        rgb_grad = np.asarray(rgb_grad, dtype=np.float64)
        if rgb_grad.shape != (geom.height, geom.width, 3):
            raise ValueError(f"rgb gradient shape {rgb_grad.shape} mismatch")
        grads.append(rgb_grad)
    if query_grad is not None:
        query_grad = np.asarray(query_grad, dtype=np.float64)
        k = len(range(*qsel.indices(scene.query_length)))
        if query_grad.shape != (geom.height, geom.width, k):
            raise ValueError(f"query gradient shape {query_grad.shape} mismatch")
        grads.append(query_grad)

    payload = _build_payload(scene, rgb_grad is not None, qsel)
    grad_out = np.concatenate(grads, axis=2) if len(grads) > 1 else grads[0]
    payload_grad, opacity_grad = geom.backward(payload, grad_out, len(scene))

    opacity = scene.opacities()
    n_rgb = 3 if rgb_grad is not None else 0
    return RenderGradients(
        color_sh=payload_grad[:, :3] * SH_C0 if rgb_grad is not None else None,
        opacity_logit=opacity_grad * opacity * (1.0 - opacity),
        query=payload_grad[:, n_rgb:] if query_grad is not None else None,
    )
