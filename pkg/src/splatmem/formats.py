"""File-format glue: M3FT feature tensors, camera manifests, PNGs, reports.

M3FT (little-endian): magic ``M3FT``, version u32, model name (u32 length +
UTF-8), n, h, w, d u32, then float32 data laid out [view][row][col][dim].
Embedding lists reuse M3FT with n=1, h=1, w=m.

The camera manifest is a JSON list of views; relative paths inside it are
resolved against the manifest's directory.
"""

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from splatmem.errors import DimensionError, FormatError
from splatmem.memory import FeatureTensor
from splatmem.metrics import GroundingSet, RetrievalSet
from splatmem.scene import CameraView

MAGIC = b"M3FT"
VERSION = 1


# -- feature tensors ---------------------------------------------------------


def save_features(tensor: FeatureTensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        raw = tensor.model_name.encode("utf-8")
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<IIII", tensor.n_views, tensor.height,
                             tensor.width, tensor.dim))
        fh.write(tensor.data.astype("<f4").tobytes())


def load_features(path) -> FeatureTensor:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not an M3FT file")
    version, name_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported M3FT version {version}")
    off = 12
    name = data[off:off + name_len].decode("utf-8")
    off += name_len
    try:
        n, h, w, d = struct.unpack_from("<IIII", data, off)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    off += 16
    count = n * h * w * d
    if len(data) < off + 4 * count:
        raise DimensionError(
            f"{path}: header promises {count} float32 values, file too short")
    rows = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    try:
        return FeatureTensor(model_name=name, n_views=n, height=h, width=w,
                             data=rows.reshape(n * h * w, d).copy())
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def load_embeddings(path):
    """Embedding list stored with the n=1, h=1, w=m convention; returns (m, d)."""
    tensor = load_features(path)
    if tensor.n_views != 1 or tensor.height != 1:
        raise FormatError(f"{path}: embedding lists must have n_views=1, h=1")
    return tensor.data.astype(np.float64)


def save_embeddings(name, rows, path) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float32))
    save_features(FeatureTensor(model_name=name, n_views=1, height=1,
                                width=len(rows), data=rows), path)


# -- images ------------------------------------------------------------------


def read_image(path):
    """PNG/JPEG to float (h, w, 3) in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, array) -> None:
    """Float [0, 1] array to an 8-bit PNG; values are clamped first."""
    arr = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path, format="PNG")


def read_mask(path):
    """PNG to a boolean (h, w) mask; any nonzero pixel counts as inside."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 0


# -- camera manifest ---------------------------------------------------------

_VIEW_KEYS = {"fx", "fy", "cx", "cy", "width", "height", "world_to_camera",
              "image", "features"}


def load_cameras(path) -> list[CameraView]:
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list) or not entries:
        raise FormatError(f"{path}: camera manifest must be a non-empty JSON list")
    views = []
    for i, entry in enumerate(entries):
        unknown = set(entry) - _VIEW_KEYS
        if unknown:
            raise FormatError(f"{path}: view {i} has unknown keys {sorted(unknown)}")
        try:
            w2c = np.asarray(entry["world_to_camera"], dtype=np.float64).reshape(4, 4)
            view = CameraView(
                fx=float(entry["fx"]), fy=float(entry["fy"]),
                cx=float(entry["cx"]), cy=float(entry["cy"]),
                world_to_camera=w2c,
                width=int(entry["width"]), height=int(entry["height"]),
                image_path=str(base / entry["image"]) if "image" in entry else None,
                feature_paths={m: str(base / p)
                               for m, p in entry.get("features", {}).items()},
            ).validate()
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: view {i}: {exc}") from exc
        views.append(view)
    return views


def save_cameras(views, path) -> None:
    entries = []
    base = Path(path).parent
    for view in views:
        entry = {
            "fx": view.fx, "fy": view.fy, "cx": view.cx, "cy": view.cy,
            "width": view.width, "height": view.height,
            "world_to_camera": np.asarray(view.world_to_camera,
                                          dtype=np.float64).ravel().tolist(),
        }
        if view.image_path:
            entry["image"] = _relative_or_abs(view.image_path, base)
        if view.feature_paths:
            entry["features"] = {m: _relative_or_abs(p, base)
                                 for m, p in view.feature_paths.items()}
        entries.append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=1)
        fh.write("\n")


def _relative_or_abs(target, base):
    try:
        return str(Path(target).relative_to(base))
    except ValueError:
        return str(target)


# -- evaluation manifests ----------------------------------------------------


def load_retrieval_set(path) -> RetrievalSet:
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    unknown = set(spec) - {"image_embeddings", "text_embeddings", "pooling"}
    if unknown:
        raise FormatError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return RetrievalSet(
            image_embeddings=load_embeddings(base / spec["image_embeddings"]),
            text_embeddings=load_embeddings(base / spec["text_embeddings"]),
            pooling=spec.get("pooling", "mean"),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def load_grounding_set(path) -> GroundingSet:
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    unknown = set(spec) - {"queries", "masks"}
    if unknown:
        raise FormatError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        queries = load_embeddings(base / spec["queries"])
        masks = np.stack([read_mask(base / m) for m in spec["masks"]])
        return GroundingSet(queries=queries, masks=masks)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- train reports -----------------------------------------------------------


def write_report(report, path) -> None:
    """Line-delimited records: the loss curve, then a summary line."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in report.curve:
            fh.write(json.dumps({"kind": "loss", **entry}, sort_keys=True))
            fh.write("\n")
        summary = {"kind": "summary", "iterations": report.iterations,
                   "wall_clock": report.wall_clock}
        if report.final_eval is not None:
            summary["final_eval"] = report.final_eval
        fh.write(json.dumps(summary, sort_keys=True))
        fh.write("\n")


def read_report_records(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
