"""Scene types, invariants, and M3GS round trips."""

import struct

import numpy as np
import pytest

from splatmem.errors import DimensionError, FormatError
from splatmem.scene import (GaussianScene, init_scene_from_points, load_scene,
                            save_scene)


def _random_scene_f32(rng, n, l):
    """Random scene whose fields are exactly representable in float32."""
    f32 = lambda shape: rng.standard_normal(shape).astype(np.float32).astype(np.float64)
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    slices = {"a": (0, l // 2), "b": (l // 2, l - l // 2)} if l >= 2 else {"a": (0, l)}
    return GaussianScene(
        centroids=f32((n, 3)),
        rotations=quats.astype(np.float32).astype(np.float64),
        log_scales=f32((n, 3)),
        opacity_logits=f32(n),
        color_sh=f32((n, 3)),
        queries=f32((n, l)),
        model_slices=slices,
    )


def test_single_primitive_round_trip(tmp_path, rng):
    scene = _random_scene_f32(rng, 1, 6)
    path = tmp_path / "one.m3gs"
    save_scene(scene, path)
    loaded = load_scene(path)
    assert len(loaded) == 1
    assert loaded.query_length == 6
    assert loaded.model_slices == scene.model_slices


def test_round_trip_bitwise(tmp_path, rng):
    scene = _random_scene_f32(rng, 100, 8)
    path = tmp_path / "scene.m3gs"
    save_scene(scene, path)
    loaded = load_scene(path)
    for field in ("centroids", "log_scales", "opacity_logits", "color_sh", "queries"):
        a = getattr(scene, field).astype(np.float32)
        b = getattr(loaded, field).astype(np.float32)
        assert np.array_equal(a.view(np.uint32), b.view(np.uint32)), field
    # quaternions pass through load without renormalization drift
    assert np.array_equal(scene.rotations.astype(np.float32).view(np.uint32),
                          loaded.rotations.astype(np.float32).view(np.uint32))
    # a second save must reproduce the file byte for byte
    path2 = tmp_path / "scene2.m3gs"
    save_scene(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_order_preserved(tmp_path, rng):
    scene = _random_scene_f32(rng, 10, 2)
    scene.centroids[:, 0] = np.arange(10)  # distinct marker per primitive
    path = tmp_path / "ordered.m3gs"
    save_scene(scene, path)
    assert np.array_equal(load_scene(path).centroids[:, 0], np.arange(10))


def test_quaternions_unit_after_load(tmp_path, rng):
    scene = _random_scene_f32(rng, 50, 4)
    path = tmp_path / "q.m3gs"
    save_scene(scene, path)
    norms = np.linalg.norm(load_scene(path).rotations, axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-6)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.m3gs"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        load_scene(path)


def test_bad_version_rejected(tmp_path, rng):
    scene = _random_scene_f32(rng, 2, 2)
    path = tmp_path / "v.m3gs"
    save_scene(scene, path)
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_scene(path)


def test_zero_primitive_file_rejected(tmp_path):
    path = tmp_path / "empty.m3gs"
    path.write_bytes(b"M3GS" + struct.pack("<III", 1, 0, 4) + struct.pack("<I", 0))
    with pytest.raises(FormatError, match="empty scene"):
        load_scene(path)


def test_truncated_primitive_block(tmp_path, rng):
    scene = _random_scene_f32(rng, 4, 4)
    path = tmp_path / "trunc.m3gs"
    save_scene(scene, path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(DimensionError):
        load_scene(path)


def test_query_width_mismatch_is_dimension_error(tmp_path, rng):
    # header says l=8 but the rows were written with l=4
    scene = _random_scene_f32(rng, 4, 4)
    path = tmp_path / "lmis.m3gs"
    save_scene(scene, path)
    data = bytearray(path.read_bytes())
    data[12:16] = struct.pack("<I", 8)
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_scene(path)


def test_empty_scene_rejected_before_write(tmp_path, rng):
    scene = _random_scene_f32(rng, 1, 2)
    scene.centroids = scene.centroids[:0]
    scene.rotations = scene.rotations[:0]
    scene.log_scales = scene.log_scales[:0]
    scene.opacity_logits = scene.opacity_logits[:0]
    scene.color_sh = scene.color_sh[:0]
    scene.queries = scene.queries[:0]
    path = tmp_path / "never.m3gs"
    with pytest.raises(ValueError, match="empty scene"):
        save_scene(scene, path)
    assert not path.exists()


def test_slices_must_tile_query_range():
    base = dict(
        centroids=np.zeros((1, 3)),
        rotations=[[1.0, 0, 0, 0]],
        log_scales=np.zeros((1, 3)),
        opacity_logits=[0.0],
        color_sh=np.zeros((1, 3)),
        queries=np.zeros((1, 6)),
    )
    GaussianScene(**base, model_slices={"a": (0, 2), "b": (2, 4)})
    with pytest.raises(ValueError):
        GaussianScene(**base, model_slices={"a": (0, 2), "b": (3, 3)})  # gap
    with pytest.raises(ValueError):
        GaussianScene(**base, model_slices={"a": (0, 4), "b": (2, 4)})  # overlap
    with pytest.raises(ValueError):
        GaussianScene(**base, model_slices={"a": (0, 2)})  # undercover


def test_init_single_point():
    scene = init_scene_from_points([[0.0, 0.0, 0.0]], [[1.0, 1.0, 1.0]], 6)
    assert np.allclose(scene.centroids[0], 0.0)
    assert np.allclose(scene.rotations[0], [1, 0, 0, 0])
    assert np.allclose(scene.queries, 0.0)
    assert np.allclose(scene.opacities(), 0.1)


def test_init_two_points_nearest_neighbor_scale():
    scene = init_scene_from_points([[0, 0, 0], [2, 0, 0]],
                                   [[1, 1, 1], [0, 0, 0]], 4)
    assert np.allclose(scene.scales(), 2.0)


def test_init_colors_round_trip_through_sh():
    colors = np.array([[0.2, 0.5, 0.9]])
    scene = init_scene_from_points([[0, 0, 0]], colors, 2)
    assert np.allclose(scene.colors(), colors)


def test_init_empty_rejected():
    with pytest.raises(ValueError):
        init_scene_from_points(np.zeros((0, 3)), np.zeros((0, 3)), 4)
