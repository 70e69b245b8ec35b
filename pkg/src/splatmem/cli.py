"""Command-line surface.

Every subcommand reads one JSON config (``--config``); paths inside it are
resolved against the config file's directory and validated before any
compute runs, so a config error never leaves partial outputs. Unknown keys
are rejected. Exit codes: 0 success, 2 config error, 3 data/format error,
4 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from splatmem import formats
from splatmem.attention import attend
from splatmem.errors import ConfigError, FormatError, NumericalError
from splatmem.memory import (DEFAULT_CHUNK, DEFAULT_THETA, FeatureTensor,
                             init_projection, load_bank, reduce_similarity,
                             save_bank)
from splatmem.metrics import (cosine_l2_maps, grounding_scores, psnr,
                              retrieval_at_k, ssim)
from splatmem.rasterizer import render_view
from splatmem.scene import load_scene, save_scene
from splatmem.training import TrainConfig, fit_appearance, fit_memory
from splatmem.viz import heatmap_overlay, pca_visualize

_MISSING = object()


# -- config plumbing ---------------------------------------------------------


class RunConfig:
    """One command's validated parameter set."""

    def __init__(self, path):
        self.base = Path(path).parent
        try:
            with open(path, "r", encoding="utf-8") as fh:
                self.raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(self.raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")

    def check_keys(self, allowed):
        unknown = set(self.raw) - set(allowed)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def get(self, key, kind, default=_MISSING):
        if key not in self.raw:
            if default is _MISSING:
                raise ConfigError(f"missing required config key: {key!r}")
            return default
        value = self.raw[key]
        try:
            return kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc

    def in_path(self, key, default=_MISSING):
        value = self.get(key, str, default)
        if value is default and value is not _MISSING:
            return value
        return self._resolve_input(value, key)

    def _resolve_input(self, value, key):
        path = self.base / str(value)
        if not path.exists():
            raise ConfigError(f"config key {key!r}: path does not exist: {path}")
        return path

    def in_path_map(self, key, required=True, allow_list=False):
        """{model: path} or, with allow_list, {model: path | [paths]}."""
        if key not in self.raw:
            if required:
                raise ConfigError(f"missing required config key: {key!r}")
            return {}
        value = self.raw[key]
        if not isinstance(value, dict) or not value:
            raise ConfigError(f"config key {key!r} must be a non-empty object")
        out = {}
        for model, entry in value.items():
            if allow_list and isinstance(entry, list):
                out[model] = [self._resolve_input(p, f"{key}.{model}") for p in entry]
            else:
                out[model] = self._resolve_input(entry, f"{key}.{model}")
        return out

    def out_path(self, key, default=_MISSING):
        value = self.get(key, str, default)
        if value is None:
            return None
        path = self.base / str(value)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def out_dir(self, key):
        path = self.base / self.get(key, str)
        path.mkdir(parents=True, exist_ok=True)
        return path


def _degrees(cfg):
    value = cfg.raw.get("degrees", 16)
    if isinstance(value, dict):
        return {m: int(v) for m, v in value.items()}
    return int(value)


def _train_config(cfg, **overrides):
    kwargs = dict(
        degrees=_degrees(cfg),
        iterations=cfg.get("iters", int, 30000),
        points_per_step=cfg.get("points", int, 2000),
        lambda_cos=cfg.get("lambda_cos", float, 1.0),
        lambda_l2=cfg.get("lambda_l2", float, 0.2),
        lr_query=cfg.get("lr_query", float, 2.5e-2),
        lr_w_m=cfg.get("lr_wm", float, 1e-3),
        lr_color=cfg.get("lr_color", float, 2.5e-3),
        lr_opacity=cfg.get("lr_opacity", float, 5e-2),
        seed=cfg.get("seed", int, 0),
        theta=cfg.get("theta", float, DEFAULT_THETA),
        temperature_mode=cfg.get("temperature", str, "inv_sqrt_d"),
        log_interval=cfg.get("log_interval", int, 50),
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs).validate()


def _load_feature_stack(paths, model):
    """Concatenate one or more M3FT files into a single row matrix."""
    if not isinstance(paths, list):
        paths = [paths]
    tensors = [formats.load_features(p) for p in paths]
    dims = {t.dim for t in tensors}
    if len(dims) != 1:
        raise FormatError(f"model {model!r}: inconsistent feature dims {sorted(dims)}")
    total_rows = sum(len(t.data) for t in tensors)
    first = tensors[0]
    data = np.concatenate([t.data for t in tensors], axis=0)
    return FeatureTensor(model_name=model, n_views=sum(t.n_views for t in tensors),
                         height=first.height, width=first.width, data=data), total_rows


def _per_view_features(views, models, bank_dims):
    """Load each view's per-model feature map from the camera manifest."""
    stacks = {m: [] for m in models}
    for i, view in enumerate(views):
        for model in models:
            if model not in view.feature_paths:
                raise ConfigError(
                    f"view {i} has no feature path for model {model!r}")
            tensor = formats.load_features(view.feature_paths[model])
            if tensor.n_views != 1:
                raise ConfigError(
                    f"view {i} model {model!r}: per-view files must hold one view")
            if (tensor.height, tensor.width) != (view.height, view.width):
                raise ConfigError(
                    f"view {i} model {model!r}: feature dims "
                    f"{(tensor.height, tensor.width)} != camera "
                    f"{(view.height, view.width)}")
            if model in bank_dims and tensor.dim != bank_dims[model]:
                raise ConfigError(
                    f"view {i} model {model!r}: feature dim {tensor.dim} != "
                    f"bank dim {bank_dims[model]}")
            stacks[model].append(tensor.view(0).astype(np.float64))
    return stacks


# -- subcommands -------------------------------------------------------------


def cmd_reduce(cfg: RunConfig) -> int:
    cfg.check_keys({"features", "theta", "chunk", "degrees", "seed", "out"})
    feature_paths = cfg.in_path_map("features", allow_list=True)
    theta = cfg.get("theta", float, DEFAULT_THETA)
    chunk = cfg.get("chunk", int, DEFAULT_CHUNK)
    degrees = _degrees(cfg)
    seed = cfg.get("seed", int, 0)
    out_dir = cfg.out_dir("out")
    if not 0.0 < theta <= 1.0:
        raise ConfigError(f"theta must be in (0, 1], got {theta}")
    if chunk < 1:
        raise ConfigError(f"chunk must be >= 1, got {chunk}")

    for offset, model in enumerate(sorted(feature_paths)):
        tensor, rows = _load_feature_stack(feature_paths[model], model)
        try:
            bank = reduce_similarity(tensor, theta, chunk)
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
        degree = degrees[model] if isinstance(degrees, dict) else degrees
        init_projection(bank, degree, seed + offset)
        save_bank(bank, out_dir / f"{model}.m3pb")
        print(f"{model}: t={bank.size} rows={rows} ratio={rows / bank.size:.2f}")
    return 0


def cmd_fit_rgb(cfg: RunConfig) -> int:
    cfg.check_keys({"scene", "cameras", "iters", "seed", "out", "report",
                    "lr_color", "lr_opacity", "log_interval"})
    scene = load_scene(cfg.in_path("scene"))
    views = formats.load_cameras(cfg.in_path("cameras"))
    config = _train_config(cfg)
    images = []
    for i, view in enumerate(views):
        if not view.image_path or not Path(view.image_path).exists():
            raise ConfigError(f"view {i} has no readable image")
        images.append(formats.read_image(view.image_path))
    out = cfg.out_path("out")
    report_path = cfg.out_path("report", None)

    scene, report = fit_appearance(scene, views, images, config)
    save_scene(scene, out)
    if report_path:
        formats.write_report(report, report_path)
    final = report.curve[-1]["loss"] if report.curve else float("nan")
    print(f"fit-rgb: iterations={config.iterations} final_loss={final:.6f}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    cfg.check_keys({"scene", "cameras", "bank", "iters", "seed", "out",
                    "banks_out", "report", "points", "lambda_cos", "lambda_l2",
                    "lr_query", "lr_wm", "temperature", "log_interval",
                    "eval_views", "degrees", "theta"})
    scene = load_scene(cfg.in_path("scene"))
    views = formats.load_cameras(cfg.in_path("cameras"))
    bank_paths = cfg.in_path_map("bank")
    banks = {m: load_bank(p) for m, p in bank_paths.items()}
    config = _train_config(cfg)
    eval_idx = cfg.raw.get("eval_views", [])
    if not isinstance(eval_idx, list) or not all(
            isinstance(i, int) and 0 <= i < len(views) for i in eval_idx):
        raise ConfigError("eval_views must be a list of valid view indices")

    bank_dims = {m: b.dim for m, b in banks.items()}
    models = list(scene.model_slices)
    features = _per_view_features(views, models, bank_dims)
    out = cfg.out_path("out")
    banks_out = cfg.out_dir("banks_out")
    report_path = cfg.out_path("report", None)
    train_mask = [i for i in range(len(views)) if i not in set(eval_idx)]
    train_views = [views[i] for i in train_mask]
    train_feats = {m: [features[m][i] for i in train_mask] for m in models}
    eval_views = [views[i] for i in eval_idx]
    eval_feats = {m: [features[m][i] for i in eval_idx] for m in models}

    scene, banks, report = fit_memory(
        scene, train_views, train_feats, banks, config,
        eval_views=eval_views or None, eval_features=eval_feats if eval_idx else None)
    save_scene(scene, out)
    for model, bank in banks.items():
        save_bank(bank, banks_out / f"{model}.m3pb")
    if report_path:
        formats.write_report(report, report_path)
    final = report.curve[-1]["loss"] if report.curve else float("nan")
    print(f"train: iterations={config.iterations} final_loss={final:.6f}")
    if report.final_eval:
        for model in sorted(report.final_eval):
            ev = report.final_eval[model]
            print(f"eval {model}: cosine={ev['cosine']:.6f} l2={ev['l2']:.6f}")
    return 0


def cmd_render(cfg: RunConfig) -> int:
    cfg.check_keys({"scene", "cameras", "view", "bank", "rgb", "out",
                    "temperature"})
    scene = load_scene(cfg.in_path("scene"))
    views = formats.load_cameras(cfg.in_path("cameras"))
    view_idx = cfg.get("view", int, 0)
    if not 0 <= view_idx < len(views):
        raise ConfigError(f"view index {view_idx} out of range")
    bank_paths = cfg.in_path_map("bank", required=False)
    want_rgb = cfg.get("rgb", bool, True)
    temperature = cfg.get("temperature", str, "inv_sqrt_d")
    out_dir = cfg.out_dir("out")
    if not want_rgb and not bank_paths:
        raise ConfigError("nothing to render: rgb disabled and no banks given")

    camera = views[view_idx]
    if want_rgb:
        output = render_view(scene, camera, rgb=True)
        formats.write_image(out_dir / "rgb.png", output.rgb)
        print(f"render: wrote {out_dir / 'rgb.png'}")
    for model in sorted(bank_paths):
        bank = load_bank(bank_paths[model])
        if model not in scene.model_slices:
            raise ConfigError(f"scene has no query slice for model {model!r}")
        output = render_view(scene, camera, rgb=False, query=model)
        feats = attend(output.query_map, bank, temperature).rendered_features
        tensor = FeatureTensor(model_name=model, n_views=1, height=camera.height,
                               width=camera.width,
                               data=feats.reshape(-1, bank.dim).astype(np.float32))
        formats.save_features(tensor, out_dir / f"{model}.m3ft")
        print(f"render: wrote {out_dir / (model + '.m3ft')}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    cfg.check_keys({"pred", "gt", "images", "retrieval", "grounding", "out"})
    pred_paths = cfg.in_path_map("pred", required=False)
    gt_paths = cfg.in_path_map("gt", required=False)
    if set(pred_paths) != set(gt_paths):
        raise ConfigError("pred and gt must list the same models")
    image_pair = cfg.raw.get("images")
    if image_pair is not None:
        if not isinstance(image_pair, dict) or set(image_pair) != {"pred", "gt"}:
            raise ConfigError("images must be an object with keys pred and gt")
        image_pair = {k: cfg._resolve_input(v, f"images.{k}")
                      for k, v in image_pair.items()}
    retrieval_path = cfg.in_path("retrieval", None)
    grounding_spec = cfg.raw.get("grounding")
    if grounding_spec is not None:
        if not isinstance(grounding_spec, dict) or set(grounding_spec) != {
                "features", "manifest"}:
            raise ConfigError("grounding must be an object with features and manifest")
        grounding_spec = {k: cfg._resolve_input(v, f"grounding.{k}")
                          for k, v in grounding_spec.items()}
    out_path = cfg.out_path("out", None)
    if not (pred_paths or image_pair or retrieval_path or grounding_spec):
        raise ConfigError("nothing to evaluate")

    records = []
    for model in sorted(pred_paths):
        pred = formats.load_features(pred_paths[model])
        gt = formats.load_features(gt_paths[model])
        if pred.data.shape != gt.data.shape:
            raise FormatError(f"model {model!r}: pred/gt feature shapes differ")
        cos, l2 = cosine_l2_maps(pred.data.astype(np.float64),
                                 gt.data.astype(np.float64))
        records.append({"kind": "feature", "model": model, "cosine": cos, "l2": l2})
    if image_pair:
        a = formats.read_image(image_pair["pred"])
        b = formats.read_image(image_pair["gt"])
        records.append({"kind": "image", "psnr": psnr(a, b), "ssim": ssim(a, b)})
    if retrieval_path:
        rset = formats.load_retrieval_set(retrieval_path)
        ks = tuple(k for k in (1, 5, 10) if k <= rset.size)
        records.append({"kind": "retrieval", **retrieval_at_k(rset, ks)})
    if grounding_spec:
        tensor = formats.load_features(grounding_spec["features"])
        gset = formats.load_grounding_set(grounding_spec["manifest"])
        scores = grounding_scores(tensor.view(0).astype(np.float64), gset)
        records.append({"kind": "grounding", **scores})

    for record in records:
        kind = record["kind"]
        for key in sorted(k for k in record if k != "kind"):
            value = record[key]
            if isinstance(value, float):
                print(f"{kind}.{key:<24} {value:.6f}")
            else:
                print(f"{kind}.{key:<24} {value}")
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True))
                fh.write("\n")
    return 0


def cmd_query(cfg: RunConfig) -> int:
    cfg.check_keys({"scene", "cameras", "view", "bank", "embedding", "row",
                    "out", "temperature"})
    scene = load_scene(cfg.in_path("scene"))
    views = formats.load_cameras(cfg.in_path("cameras"))
    view_idx = cfg.get("view", int, 0)
    if not 0 <= view_idx < len(views):
        raise ConfigError(f"view index {view_idx} out of range")
    bank_paths = cfg.in_path_map("bank")
    if len(bank_paths) != 1:
        raise ConfigError("query needs exactly one bank")
    embedding_rows = formats.load_embeddings(cfg.in_path("embedding"))
    row = cfg.get("row", int, 0)
    if not 0 <= row < len(embedding_rows):
        raise ConfigError(f"embedding row {row} out of range")
    temperature = cfg.get("temperature", str, "inv_sqrt_d")
    out_dir = cfg.out_dir("out")

    (model, bank_path), = bank_paths.items()
    bank = load_bank(bank_path)
    if model not in scene.model_slices:
        raise ConfigError(f"scene has no query slice for model {model!r}")
    camera = views[view_idx]
    output = render_view(scene, camera, rgb=True, query=model)
    feats = attend(output.query_map, bank, temperature).rendered_features
    target = embedding_rows[row]
    norm_t = max(float(np.linalg.norm(target)), 1e-8)
    norms = np.maximum(np.linalg.norm(feats, axis=2), 1e-8)
    sim = feats @ target / (norms * norm_t)

    overlay, argmax = heatmap_overlay(output.rgb, sim)
    formats.write_image(out_dir / "heatmap.png", overlay)
    result = {"argmax": list(argmax), "similarity": float(sim[argmax]),
              "model": model, "view": view_idx, "row": row}
    with open(out_dir / "result.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, sort_keys=True)
        fh.write("\n")
    print(f"query: argmax pixel (row, col) = {argmax}")
    return 0


def cmd_viz(cfg: RunConfig) -> int:
    cfg.check_keys({"features", "view", "out"})
    tensor = formats.load_features(cfg.in_path("features"))
    view_idx = cfg.get("view", int, 0)
    if not 0 <= view_idx < tensor.n_views:
        raise ConfigError(f"view index {view_idx} out of range")
    out = cfg.out_path("out")
    try:
        image = pca_visualize(tensor.view(view_idx).astype(np.float64))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    formats.write_image(out, image)
    print(f"viz: wrote {out}")
    return 0


_COMMANDS = {
    "reduce": cmd_reduce,
    "fit-rgb": cmd_fit_rgb,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "query": cmd_query,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="splatmem",
        description="Gaussian-splat scene memory: bank building, training, "
                    "rendering, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig(args.config)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
