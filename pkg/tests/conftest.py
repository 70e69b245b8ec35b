"""Shared scene/camera builders for the test suite."""

import numpy as np
import pytest

from splatmem.scene import CameraView, GaussianScene


def lookat_w2c(eye, target, up=(0.0, 1.0, 0.0)):
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(np.asarray(up, dtype=np.float64), fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return w2c


def make_camera(width=32, height=32, eye=(0.0, 0.0, -6.0), target=(0.0, 0.0, 0.0),
                fov_scale=3.0, **kwargs):
    """Camera looking at `target`; fov_scale is focal length / half-width."""
    return CameraView(
        fx=fov_scale * width / 2.0,
        fy=fov_scale * width / 2.0,
        cx=width / 2.0,
        cy=height / 2.0,
        world_to_camera=lookat_w2c(eye, target),
        width=width,
        height=height,
        **kwargs,
    ).validate()


def random_scene(rng, n=5, query_length=0, model_slices=None, spread=1.5,
                 scale_range=(0.25, 0.6), opacity_range=(0.3, 0.8)):
    """Random primitives near the origin, safely inside the default frustum."""
    quats = rng.standard_normal((n, 4))
    lo, hi = opacity_range
    opac = rng.uniform(lo, hi, n)
    queries = rng.standard_normal((n, query_length)) if query_length else np.zeros((n, 0))
    if model_slices is None:
        model_slices = {"default": (0, query_length)} if query_length else {}
    return GaussianScene(
        centroids=rng.uniform(-spread, spread, (n, 3)) * np.array([1.0, 1.0, 0.5]),
        rotations=quats,
        log_scales=np.log(rng.uniform(scale_range[0], scale_range[1], (n, 3))),
        opacity_logits=np.log(opac / (1.0 - opac)),
        color_sh=rng.standard_normal((n, 3)) * 0.5,
        queries=queries,
        model_slices=model_slices,
    )


def grid_scene(rng, rows=4, cols=5, query_length=0, model_slices=None,
               opacity=0.95, spacing=1.0, scale=0.55, depth_jitter=0.15):
    """Primitives on a jittered plane grid facing the default camera."""
    n = rows * cols
    gy, gx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    xs = (gx - (cols - 1) / 2.0) * spacing
    ys = (gy - (rows - 1) / 2.0) * spacing
    zs = rng.uniform(-depth_jitter, depth_jitter, (rows, cols))
    centroids = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    if model_slices is None:
        model_slices = {"default": (0, query_length)} if query_length else {}
    return GaussianScene(
        centroids=centroids,
        rotations=quats,
        log_scales=np.full((n, 3), np.log(scale)),
        opacity_logits=np.full(n, np.log(opacity / (1.0 - opacity))),
        color_sh=rng.uniform(-0.8, 0.8, (n, 3)),
        queries=np.zeros((n, query_length)),
        model_slices=model_slices,
    )


def ring_cameras(count, width=48, height=48, radius=6.0, swing=0.35,
                 fov_scale=2.4):
    """Cameras on a small arc in front of the scene, all aimed at its center."""
    views = []
    for i in range(count):
        angle = swing * (2.0 * i / max(count - 1, 1) - 1.0)
        eye = (radius * np.sin(angle), 0.8 * np.sin(2.1 * angle + 0.4),
               -radius * np.cos(angle))
        views.append(make_camera(width, height, eye=eye, fov_scale=fov_scale))
    return views


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
