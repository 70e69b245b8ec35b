"""M3FT files, camera manifests, evaluation manifests, images, reports."""

import json
import struct

import numpy as np
import pytest

from conftest import make_camera
from splatmem.errors import DimensionError, FormatError
from splatmem import formats
from splatmem.memory import FeatureTensor
from splatmem.training import TrainReport
from splatmem.viz import heatmap_overlay, pca_visualize


def _tensor(rng, n=2, h=3, w=4, d=5, name="m"):
    data = rng.standard_normal((n * h * w, d)).astype(np.float32)
    return FeatureTensor(model_name=name, n_views=n, height=h, width=w, data=data)


def test_features_round_trip_bitwise(tmp_path, rng):
    tensor = _tensor(rng)
    path = tmp_path / "f.m3ft"
    formats.save_features(tensor, path)
    loaded = formats.load_features(path)
    assert loaded.model_name == "m"
    assert (loaded.n_views, loaded.height, loaded.width, loaded.dim) == (2, 3, 4, 5)
    assert np.array_equal(loaded.data.view(np.uint32), tensor.data.view(np.uint32))
    path2 = tmp_path / "g.m3ft"
    formats.save_features(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_features_bad_magic_and_truncation(tmp_path, rng):
    path = tmp_path / "bad.m3ft"
    path.write_bytes(b"WHAT" + b"\x00" * 30)
    with pytest.raises(FormatError):
        formats.load_features(path)
    tensor = _tensor(rng)
    good = tmp_path / "good.m3ft"
    formats.save_features(tensor, good)
    data = good.read_bytes()
    good.write_bytes(data[:-8])
    with pytest.raises(DimensionError):
        formats.load_features(good)


def test_features_nan_rejected_on_load(tmp_path, rng):
    tensor = _tensor(rng)
    path = tmp_path / "nan.m3ft"
    formats.save_features(tensor, path)
    raw = bytearray(path.read_bytes())
    # poison one payload float with NaN
    raw[-4:] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="NaN"):
        formats.load_features(path)


def test_embedding_list_convention(tmp_path, rng):
    rows = rng.standard_normal((6, 9)).astype(np.float32)
    path = tmp_path / "e.m3ft"
    formats.save_embeddings("text", rows, path)
    loaded = formats.load_embeddings(path)
    assert loaded.shape == (6, 9)
    assert np.allclose(loaded, rows.astype(np.float64))
    bad = _tensor(rng)  # h != 1
    other = tmp_path / "n.m3ft"
    formats.save_features(bad, other)
    with pytest.raises(FormatError):
        formats.load_embeddings(other)


def test_cameras_round_trip(tmp_path, rng):
    views = [make_camera(32, 24, eye=(0.1, -0.2, -5.0),
                         image_path=str(tmp_path / "img0.png"),
                         feature_paths={"clip": str(tmp_path / "c0.m3ft")}),
             make_camera(32, 24, eye=(-0.3, 0.1, -6.0))]
    path = tmp_path / "cams.json"
    formats.save_cameras(views, path)
    loaded = formats.load_cameras(path)
    assert len(loaded) == 2
    assert loaded[0].fx == views[0].fx
    assert np.allclose(loaded[0].world_to_camera, views[0].world_to_camera)
    assert loaded[0].image_path == str(tmp_path / "img0.png")
    assert loaded[0].feature_paths == {"clip": str(tmp_path / "c0.m3ft")}


def test_cameras_validation(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps([{"fx": 1.0}]))
    with pytest.raises(FormatError):
        formats.load_cameras(path)
    path.write_text(json.dumps([]))
    with pytest.raises(FormatError):
        formats.load_cameras(path)
    entry = {"fx": 10.0, "fy": 10.0, "cx": 4.0, "cy": 4.0, "width": 8, "height": 8,
             "world_to_camera": list(np.eye(4).ravel()), "bogus": 1}
    path.write_text(json.dumps([entry]))
    with pytest.raises(FormatError, match="unknown"):
        formats.load_cameras(path)
    entry.pop("bogus")
    entry["world_to_camera"] = list(np.ones((4, 4)).ravel())  # not orthonormal
    path.write_text(json.dumps([entry]))
    with pytest.raises(FormatError):
        formats.load_cameras(path)


def test_image_round_trip(tmp_path, rng):
    img = rng.uniform(0, 1, (10, 12, 3))
    path = tmp_path / "img.png"
    formats.write_image(path, img)
    loaded = formats.read_image(path)
    assert loaded.shape == (10, 12, 3)
    assert np.max(np.abs(loaded - img)) <= 0.5 / 255 + 1e-9


def test_image_write_deterministic(tmp_path, rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    formats.write_image(a, img)
    formats.write_image(b, img)
    assert a.read_bytes() == b.read_bytes()


def test_mask_round_trip(tmp_path):
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 3:7] = True
    path = tmp_path / "m.png"
    formats.write_image(path, mask.astype(np.float64)[:, :, None].repeat(3, axis=2))
    assert np.array_equal(formats.read_mask(path), mask)


def test_retrieval_manifest(tmp_path, rng):
    img = rng.standard_normal((5, 7)).astype(np.float32)
    txt = rng.standard_normal((5, 7)).astype(np.float32)
    formats.save_embeddings("img", img, tmp_path / "img.m3ft")
    formats.save_embeddings("txt", txt, tmp_path / "txt.m3ft")
    manifest = tmp_path / "ret.json"
    manifest.write_text(json.dumps({"image_embeddings": "img.m3ft",
                                    "text_embeddings": "txt.m3ft"}))
    rset = formats.load_retrieval_set(manifest)
    assert rset.size == 5
    manifest.write_text(json.dumps({"image_embeddings": "img.m3ft"}))
    with pytest.raises(FormatError):
        formats.load_retrieval_set(manifest)


def test_grounding_manifest(tmp_path, rng):
    queries = rng.standard_normal((2, 4)).astype(np.float32)
    formats.save_embeddings("q", queries, tmp_path / "q.m3ft")
    for i in range(2):
        mask = np.zeros((6, 6))
        mask[i, :] = 1.0
        formats.write_image(tmp_path / f"m{i}.png", mask[:, :, None].repeat(3, axis=2))
    manifest = tmp_path / "g.json"
    manifest.write_text(json.dumps({"queries": "q.m3ft",
                                    "masks": ["m0.png", "m1.png"]}))
    gset = formats.load_grounding_set(manifest)
    assert gset.size == 2
    assert gset.masks.shape == (2, 6, 6)


def test_report_round_trip(tmp_path):
    report = TrainReport(iterations=10, wall_clock=1.5)
    report.record(0, 0.5, {"clip": 0.3})
    report.record(5, 0.2)
    report.final_eval = {"clip": {"cosine": 0.1, "l2": 0.2}}
    path = tmp_path / "r.jsonl"
    formats.write_report(report, path)
    records = formats.read_report_records(path)
    assert records[0] == {"kind": "loss", "step": 0, "loss": 0.5, "loss_clip": 0.3}
    assert records[-1]["kind"] == "summary"
    assert records[-1]["final_eval"] == {"clip": {"cosine": 0.1, "l2": 0.2}}


# -- visualization -------------------------------------------------------------


def test_pca_requires_three_channels(rng):
    with pytest.raises(ValueError):
        pca_visualize(rng.standard_normal((4, 4, 2)))


def test_pca_constant_map_is_gray():
    out = pca_visualize(np.full((5, 5, 8), 3.25))
    assert np.allclose(out, 0.5)


def test_pca_rank_one_single_hue(rng):
    direction = rng.standard_normal(6)
    weights = rng.standard_normal((5, 5, 1))
    fm = weights * direction
    out = pca_visualize(fm)
    # components 2 and 3 are degenerate -> flat 0.5; component 1 spans [0, 1]
    assert np.allclose(out[:, :, 1], 0.5)
    assert np.allclose(out[:, :, 2], 0.5)
    assert out[:, :, 0].min() == pytest.approx(0.0, abs=1e-12)
    assert out[:, :, 0].max() == pytest.approx(1.0, abs=1e-12)


def test_pca_deterministic(rng):
    fm = rng.standard_normal((6, 7, 9))
    assert np.array_equal(pca_visualize(fm), pca_visualize(fm.copy()))


def test_heatmap_overlay_argmax(rng):
    rgb = rng.uniform(0, 1, (5, 5, 3))
    sim = rng.standard_normal((5, 5))
    sim[3, 1] = sim.max() + 1.0
    overlay, argmax = heatmap_overlay(rgb, sim)
    assert argmax == (3, 1)
    assert np.allclose(overlay[3, 1], [1.0, 0.0, 0.0])  # full red at the peak
    assert overlay.min() >= 0.0 and overlay.max() <= 1.0
    # constant similarity highlights nothing
    flat, _ = heatmap_overlay(rgb, np.zeros((5, 5)))
    assert np.allclose(flat, rgb)
