"""Rasterizer: projection, compositing, rendering, and gradients."""

import numpy as np
import pytest

from conftest import make_camera, random_scene
from oracles import central_difference, pinhole_project, render_naive
from splatmem import backend
from splatmem.backend import jitted, reference
from splatmem.rasterizer import (ViewGeometry, backward_render, composite_pixel,
                                 fragment_alpha, project, render_view)
from splatmem.scene import GaussianScene


def _single_gaussian_scene(centroid=(0.0, 0.0, 0.0), opacity=0.6, scale=0.5,
                           color=(0.3, 0.2, 0.1), query_length=0):
    return GaussianScene(
        centroids=[centroid],
        rotations=[[1.0, 0.0, 0.0, 0.0]],
        log_scales=[[np.log(scale)] * 3],
        opacity_logits=[np.log(opacity / (1 - opacity))],
        color_sh=[color],
        queries=np.zeros((1, query_length)),
        model_slices={"m": (0, query_length)} if query_length else {},
    )


# -- projection ----------------------------------------------------------------


def test_on_axis_projection_hits_principal_point():
    camera = make_camera(32, 32)
    frag = project(_single_gaussian_scene(), 0, camera)
    assert frag is not None
    assert np.allclose(frag.mean2d, [camera.cx, camera.cy], atol=1e-9)
    assert frag.depth == pytest.approx(6.0)


def test_behind_camera_culled():
    camera = make_camera(32, 32)
    frag = project(_single_gaussian_scene(centroid=(0, 0, -7.0)), 0, camera)
    assert frag is None


def test_offaxis_projection_matches_pinhole_oracle(rng):
    camera = make_camera(64, 48, eye=(0.4, -0.3, -5.5), target=(0.1, 0.0, 0.2))
    scene = random_scene(rng, n=20)
    for i in range(len(scene)):
        frag = project(scene, i, camera)
        assert frag is not None
        assert np.allclose(frag.mean2d, pinhole_project(scene.centroids[i], camera),
                           atol=1e-6)


def test_projected_covariance_lowpassed(rng):
    camera = make_camera(32, 32)
    scene = random_scene(rng, n=30, scale_range=(0.01, 0.4))
    for i in range(len(scene)):
        frag = project(scene, i, camera)
        eigvals = np.linalg.eigvalsh(frag.cov2d)
        assert eigvals.min() >= 0.3 - 1e-12
        assert np.allclose(frag.cov2d, frag.cov2d.T)
        assert frag.depth > 0.01


# -- composite_pixel -----------------------------------------------------------


def test_composite_single_fragment():
    out, trans = composite_pixel([(0.99, [1.0, 0.0, 0.0], 1.0)])
    assert np.allclose(out, [0.99, 0.0, 0.0])
    assert trans == pytest.approx(0.01)


def test_composite_empty():
    out, trans = composite_pixel([])
    assert trans == 1.0
    assert np.all(out == 0.0)


def test_composite_two_fragments_hand_oracle():
    # out = p1*0.5*1 + p2*0.5*0.5 ; T = 0.5*0.5
    out, trans = composite_pixel([
        (0.5, [1.0, 0.0, 0.0], 1.0),
        (0.5, [0.0, 1.0, 0.0], 2.0),
    ])
    assert np.allclose(out, [0.5, 0.25, 0.0])
    assert trans == pytest.approx(0.25)


def test_composite_unsorted_rejected():
    with pytest.raises(ValueError, match="sorted"):
        composite_pixel([(0.5, [1.0], 2.0), (0.5, [1.0], 1.0)])


def test_composite_alpha_clamped():
    out, trans = composite_pixel([(1.5, [1.0], 1.0)])
    assert out[0] == pytest.approx(0.99)
    assert trans == pytest.approx(0.01)


def test_composite_early_termination():
    frags = [(0.95, [1.0], float(i)) for i in range(8)]
    out, trans = composite_pixel(frags)
    # transmittances: 1, .05, .0025, 1.25e-4, then 6.25e-6 < 1e-4 stops
    expected = sum(0.95 * 0.05 ** i for i in range(4))
    assert out[0] == pytest.approx(expected, abs=1e-12)
    assert trans == pytest.approx(0.05 ** 4, abs=1e-12)


# -- render_view ---------------------------------------------------------------


def test_query_channels_reproduce_rgb(rng):
    scene = random_scene(rng, n=8, query_length=3)
    scene.queries[:] = scene.colors()
    camera = make_camera(24, 24)
    out = render_view(scene, camera, rgb=True, query=(0, 3))
    assert out.rgb.shape == (24, 24, 3)
    assert np.max(np.abs(out.query_map - out.rgb)) < 1e-5


def test_transparent_scene_renders_background(rng):
    scene = random_scene(rng, n=6, query_length=2)
    scene.opacity_logits[:] = -40.0  # sigmoid ~ 4e-18, below the cutoff
    camera = make_camera(16, 16)
    out = render_view(scene, camera, rgb=True, query=(0, 2))
    assert np.all(out.rgb == 0.0)
    assert np.all(out.query_map == 0.0)
    assert np.all(out.alpha_map == 0.0)


def test_everything_behind_camera_is_background(rng):
    scene = random_scene(rng, n=4)
    scene.centroids[:, 2] = -20.0
    out = render_view(scene, make_camera(8, 8), rgb=True)
    assert np.all(out.rgb == 0.0)
    assert np.all(out.alpha_map == 0.0)


def test_two_gaussian_scene_matches_naive_oracle(rng):
    scene = random_scene(rng, n=2, query_length=2, spread=0.8)
    camera = make_camera(8, 8, fov_scale=2.2)
    out = render_view(scene, camera, rgb=True, query=(0, 2))
    payload = np.concatenate([scene.colors(), scene.queries], axis=1)
    expected, trans = render_naive(scene, camera, payload)
    assert np.max(np.abs(out.rgb - expected[:, :, :3])) < 1e-6
    assert np.max(np.abs(out.query_map - expected[:, :, 3:])) < 1e-6
    assert np.max(np.abs(out.alpha_map - (1.0 - trans))) < 1e-6


def test_random_scenes_match_naive_oracle(rng):
    for trial in range(20):
        n = int(rng.integers(1, 12))
        scene = random_scene(rng, n=n, query_length=2, spread=1.0,
                             opacity_range=(0.2, 0.97))
        camera = make_camera(8, 8, fov_scale=2.0,
                             eye=(0.3 * rng.standard_normal(),
                                  0.3 * rng.standard_normal(), -6.0))
        out = render_view(scene, camera, rgb=True, query=(0, 2))
        payload = np.concatenate([scene.colors(), scene.queries], axis=1)
        expected, trans = render_naive(scene, camera, payload)
        got = np.concatenate([out.rgb, out.query_map], axis=2)
        assert np.max(np.abs(got - expected)) < 1e-6, f"trial {trial}"
        assert np.max(np.abs((1.0 - out.alpha_map) - trans)) < 1e-6


def test_transmittance_monotone_along_every_pixel(rng):
    # walk the naive fragment lists and check T never increases; the renders
    # themselves are pinned to the oracle by the matching tests above
    for _ in range(5):
        scene = random_scene(rng, n=8, spread=1.0, opacity_range=(0.3, 0.97))
        camera = make_camera(8, 8, fov_scale=2.0)
        frags = []
        opac = scene.opacities()
        for i in range(len(scene)):
            frag = project(scene, i, camera)
            if frag is not None:
                frags.append((frag.depth, i, frag))
        frags.sort(key=lambda f: (f[0], f[1]))
        for row in range(8):
            for col in range(8):
                t_values = [1.0]
                for _, i, frag in frags:
                    if t_values[-1] < 1e-4:
                        break
                    alpha = fragment_alpha(frag, (col + 0.5, row + 0.5))
                    if alpha < 1.0 / 255.0:
                        continue
                    t_values.append(t_values[-1] * (1.0 - alpha))
                diffs = np.diff(t_values)
                assert np.all(diffs <= 0.0)
                assert t_values[-1] >= 0.0


def test_rendering_linear_in_payload(rng):
    scene = random_scene(rng, n=6, query_length=4)
    camera = make_camera(16, 16)
    geom = ViewGeometry(scene, camera)
    pay_a = rng.standard_normal((6, 4))
    pay_b = rng.standard_normal((6, 4))
    out_a, _ = geom.forward(pay_a)
    out_b, _ = geom.forward(pay_b)
    out_sum, _ = geom.forward(pay_a + pay_b)
    out_scaled, _ = geom.forward(2.5 * pay_a)
    assert np.max(np.abs(out_sum - (out_a + out_b))) < 1e-6
    assert np.max(np.abs(out_scaled - 2.5 * out_a)) < 1e-6


def test_query_slice_render_equals_slice_of_full_render(rng):
    scene = random_scene(rng, n=7, query_length=6,
                         model_slices={"a": (0, 2), "b": (2, 4)})
    camera = make_camera(16, 16)
    full = render_view(scene, camera, rgb=False, query=(0, 6))
    part = render_view(scene, camera, rgb=False, query="b")
    assert np.array_equal(part.query_map, full.query_map[:, :, 2:6])


def test_render_deterministic_rerun(rng):
    scene = random_scene(rng, n=10, query_length=3)
    camera = make_camera(32, 24)
    out_a = render_view(scene, camera, rgb=True, query=(0, 3))
    out_b = render_view(scene, camera, rgb=True, query=(0, 3))
    assert np.array_equal(out_a.rgb, out_b.rgb)
    assert np.array_equal(out_a.query_map, out_b.query_map)


@pytest.mark.skipif(backend.BACKEND != "numba", reason="numba backend inactive")
def test_render_invariant_to_thread_count(rng):
    import numba
    scene = random_scene(rng, n=30, query_length=4)
    camera = make_camera(64, 48)
    grad = rng.standard_normal((48, 64, 4))
    results = []
    for threads in (1, min(2, numba.config.NUMBA_NUM_THREADS)):
        numba.set_num_threads(threads)
        out = render_view(scene, camera, rgb=False, query=(0, 4))
        grads = backward_render(scene, camera, query_grad=grad, query=(0, 4))
        results.append((out.query_map, grads.query, grads.opacity_logit))
    for a, b in zip(results[0], results[1]):
        assert np.array_equal(a, b)


def test_backend_paths_agree(rng):
    scene = random_scene(rng, n=12, query_length=3)
    camera = make_camera(40, 24)
    geom = ViewGeometry(scene, camera)
    payload = np.ascontiguousarray(
        np.concatenate([scene.colors(), scene.queries], axis=1)[geom.order])
    args = (geom.tile_entries, geom.tile_start, geom.tiles_x, camera.height,
            camera.width, geom.means2d, geom.conic, geom.opacity, payload)
    out_ref, trans_ref = reference.composite_forward(*args)
    out_jit, trans_jit = jitted.composite_forward(*args)
    assert np.max(np.abs(out_ref - out_jit)) < 1e-12
    assert np.max(np.abs(trans_ref - trans_jit)) < 1e-12
    grad = rng.standard_normal(out_ref.shape)
    pg_ref, og_ref = reference.composite_backward(*args, grad)
    pg_jit, og_jit = jitted.composite_backward(*args, grad)
    assert np.max(np.abs(pg_ref - pg_jit)) < 1e-10
    assert np.max(np.abs(og_ref - og_jit)) < 1e-10


# -- backward ------------------------------------------------------------------


def test_single_fragment_payload_gradient_is_alpha():
    scene = _single_gaussian_scene(opacity=0.6, scale=0.8, query_length=2)
    camera = make_camera(9, 9)
    frag = project(scene, 0, camera)
    row, col = 4, 4
    alpha = fragment_alpha(frag, (col + 0.5, row + 0.5))
    grad_map = np.zeros((9, 9, 2))
    grad_map[row, col, 0] = 1.0
    grads = backward_render(scene, camera, query_grad=grad_map, query=(0, 2))
    assert grads.query[0, 0] == pytest.approx(alpha, rel=1e-9)
    assert grads.query[0, 1] == 0.0


def test_gradient_zero_past_early_termination():
    # five stacked opaque splats: the fifth is never composited at the center
    n = 5
    scene = GaussianScene(
        centroids=[[0.0, 0.0, 0.1 * i] for i in range(n)],
        rotations=[[1.0, 0, 0, 0]] * n,
        log_scales=[[np.log(0.6)] * 3] * n,
        opacity_logits=[np.log(0.95 / 0.05)] * n,
        color_sh=[[0.5, 0.5, 0.5]] * n,
        queries=np.eye(n),
        model_slices={"m": (0, n)},
    )
    camera = make_camera(9, 9)
    grad_map = np.zeros((9, 9, n))
    grad_map[4, 4, :] = 1.0
    grads = backward_render(scene, camera, query_grad=grad_map, query=(0, n))
    per_prim = grads.query.sum(axis=1)
    assert np.all(per_prim[:4] > 0.0)
    assert per_prim[4] == 0.0


def test_gradients_match_finite_differences(rng):
    scene = random_scene(rng, n=5, query_length=2, spread=0.8,
                         opacity_range=(0.3, 0.8))
    camera = make_camera(6, 6, fov_scale=2.0)
    w_rgb = rng.standard_normal((6, 6, 3))
    w_query = rng.standard_normal((6, 6, 2))

    def loss():
        out = render_view(scene, camera, rgb=True, query=(0, 2))
        return float((out.rgb * w_rgb).sum() + (out.query_map * w_query).sum())

    grads = backward_render(scene, camera, rgb_grad=w_rgb, query_grad=w_query,
                            query=(0, 2))

    def fd(field):
        def wrapped(arr):
            return loss()
        return central_difference(wrapped, getattr(scene, field), h=1e-4)

    for field, analytic in (("color_sh", grads.color_sh),
                            ("queries", grads.query),
                            ("opacity_logits", grads.opacity_logit)):
        numeric = fd(field)
        scale = np.maximum(np.abs(numeric), 1e-2)
        rel = np.abs(analytic - numeric) / scale
        assert rel.max() < 1e-3, f"{field}: max rel err {rel.max():.2e}"


def test_backward_channel_contract(rng):
    scene = random_scene(rng, n=3, query_length=2)
    camera = make_camera(8, 8)
    with pytest.raises(ValueError):
        backward_render(scene, camera)
    with pytest.raises(ValueError):
        backward_render(scene, camera, query_grad=np.zeros((8, 8, 2)))  # no selection
    with pytest.raises(ValueError):
        backward_render(scene, camera, rgb_grad=np.zeros((4, 4, 3)))  # bad shape
