"""Two-phase optimization.

Phase 1 (fit_appearance) fits colors and opacity against training images
with 0.8*L1 + 0.2*(1 - SSIM); geometry stays frozen. Phase 2 (fit_memory)
fits the per-primitive query vectors and each bank's projection against
ground-truth feature maps: render the query channels, attend into the bank
at a random subset of pixels, and backpropagate the point-sampled loss
through the attention and the rasterizer. Geometry, colors, and the bank
rows never change in phase 2.

Losses are summed over models without weighting; every step touches one
view, round-robin. All randomness flows from the config seed, so a rerun
reproduces the loss curve bit for bit at any worker-thread count.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from splatmem.attention import attend, attend_backward
from splatmem.errors import ConfigError, NumericalError
from splatmem.metrics import cosine_l2_maps, ssim_with_grad
from splatmem.rasterizer import ViewGeometry
from splatmem.scene import SH_C0, GaussianScene

_EPS = 1e-8

FAST_ITERATIONS = 7000


@dataclass
class TrainConfig:
    degrees: int | dict = 16          # query degrees per foundation model
    iterations: int = 30000
    points_per_step: int = 2000
    lambda_cos: float = 1.0
    lambda_l2: float = 0.2
    lr_query: float = 2.5e-2
    lr_w_m: float = 1e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    seed: int = 0
    theta: float = 0.9
    temperature_mode: str = "inv_sqrt_d"
    log_interval: int = 50

    def validate(self):
        if self.points_per_step < 1:
            raise ConfigError("points_per_step must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("lr_query", "lr_w_m", "lr_color", "lr_opacity"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 < self.theta <= 1.0:
            raise ConfigError("theta must be in (0, 1]")
        return self

    def degree_of(self, model):
        if isinstance(self.degrees, dict):
            return int(self.degrees[model])
        return int(self.degrees)


@dataclass
class TrainReport:
    curve: list = field(default_factory=list)   # {step, loss, per-model...}
    final_eval: dict | None = None              # model -> {cosine, l2}
    wall_clock: float = 0.0
    iterations: int = 0

    def record(self, step, total, per_model=None):
        entry = {"step": int(step), "loss": float(total)}
        if per_model:
            entry.update({f"loss_{m}": float(v) for m, v in per_model.items()})
        self.curve.append(entry)


class Adam:
    """Adam with the conventions used throughout: beta 0.9/0.999, eps 1e-15."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, param, grad):
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- point-sampled feature loss ----------------------------------------------


def _point_loss_rows(pred, gt, lambda_cos, lambda_l2):
    """Loss and gradient over already-sampled rows; mean over the rows."""
    n_rows, dim = pred.shape
    pn = np.maximum(np.linalg.norm(pred, axis=1), _EPS)
    gn = np.maximum(np.linalg.norm(gt, axis=1), _EPS)
    denom = pn * gn
    cos = (pred * gt).sum(axis=1) / denom
    loss = np.mean(lambda_cos * (1.0 - cos) + lambda_l2 * ((pred - gt) ** 2).sum(axis=1) / dim)
    d_cos = gt / denom[:, None] - cos[:, None] * pred / (pn ** 2)[:, None]
    grad = (-lambda_cos * d_cos + lambda_l2 * 2.0 * (pred - gt) / dim) / n_rows
    return float(loss), grad


def _sample_pixels(rng, n_pixels, count):
    if count <= n_pixels:
        return rng.choice(n_pixels, size=count, replace=False)
    return rng.integers(0, n_pixels, size=count)


def point_feature_loss(pred, gt, points, seed, lambda_cos=1.0, lambda_l2=0.2):
    """Distance loss at `points` sampled pixels; gradient is zero off-sample.

    Sampling is without replacement when points <= h*w, with replacement
    otherwise. The cosine term guards zero-norm pixels with eps=1e-8.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if points < 1:
        raise ValueError("points must be >= 1")
    h, w, d = pred.shape
    rng = np.random.default_rng(seed)
    pix = _sample_pixels(rng, h * w, points)
    loss, grad_rows = _point_loss_rows(pred.reshape(-1, d)[pix],
                                       gt.reshape(-1, d)[pix],
                                       lambda_cos, lambda_l2)
    grad = np.zeros((h * w, d))
    np.add.at(grad, pix, grad_rows)
    return loss, grad.reshape(h, w, d)


# -- phase 1: appearance -----------------------------------------------------


def _rgb_loss_with_grad(rendered, image):
    diff = rendered - image
    n = diff.size
    l1 = float(np.abs(diff).mean())
    ssim_val, ssim_grad = ssim_with_grad(rendered, image)
    loss = 0.8 * l1 + 0.2 * (1.0 - ssim_val)
    grad = 0.8 * np.sign(diff) / n - 0.2 * ssim_grad
    return loss, grad


def fit_appearance(scene: GaussianScene, views, images, config: TrainConfig):
    """Optimize color and opacity against training images; returns (scene, report)."""
    config.validate()
    if len(views) < 2:
        raise ConfigError("appearance fitting needs at least 2 views")
    if len(images) != len(views):
        raise ConfigError("one image per view required")
    for view, image in zip(views, images):
        if np.asarray(image).shape != (view.height, view.width, 3):
            raise ConfigError("image dimensions must match the camera")

    adam_color = Adam(config.lr_color)
    adam_opacity = Adam(config.lr_opacity)
    report = TrainReport(iterations=config.iterations)
    start = time.perf_counter()
    for step in range(config.iterations):
        scene.validate_slices()
        view_idx = step % len(views)
        geom = ViewGeometry(scene, views[view_idx])
        rendered, _ = geom.forward(scene.colors())
        loss, grad_rgb = _rgb_loss_with_grad(rendered, np.asarray(images[view_idx],
                                                                  dtype=np.float64))
        if not np.isfinite(loss):
            report.wall_clock = time.perf_counter() - start
            raise NumericalError(f"non-finite appearance loss at step {step}")
        payload_grad, opacity_grad = geom.backward(scene.colors(), grad_rgb, len(scene))
        opacity = scene.opacities()
        adam_color.step(scene.color_sh, payload_grad * SH_C0)
        adam_opacity.step(scene.opacity_logits, opacity_grad * opacity * (1.0 - opacity))
        if step % config.log_interval == 0 or step == config.iterations - 1:
            report.record(step, loss)
    report.wall_clock = time.perf_counter() - start
    return scene, report


# -- phase 2: memory ---------------------------------------------------------


def _validate_memory_inputs(scene, views, features, banks, config):
    models = list(scene.model_slices)
    if set(models) != set(banks):
        raise ConfigError(f"banks {sorted(banks)} do not match scene models {sorted(models)}")
    if set(models) != set(features):
        raise ConfigError(f"features {sorted(features)} do not match scene models {sorted(models)}")
    for model in models:
        bank = banks[model]
        if bank.w_m is None:
            raise ConfigError(f"bank {model!r} has no projection")
        start, length = scene.model_slices[model]
        if length != bank.degree:
            raise ConfigError(
                f"scene slice for {model!r} has {length} degrees, bank expects {bank.degree}")
        maps = features[model]
        if len(maps) != len(views):
            raise ConfigError(f"model {model!r}: {len(maps)} feature maps for {len(views)} views")
        for i, (view, fmap) in enumerate(zip(views, maps)):
            if fmap is None:
                raise ConfigError(f"missing features for view {i}, model {model!r}")
            if fmap.shape != (view.height, view.width, bank.dim):
                raise ConfigError(
                    f"view {i} model {model!r}: feature shape {fmap.shape} != "
                    f"{(view.height, view.width, bank.dim)}")
    return models


def _eval_feature_maps(scene, views, features, banks, config, geoms=None):
    """Mean cosine/L2 per model over the given views."""
    models = list(scene.model_slices)
    sums = {m: np.zeros(2) for m in models}
    for i, view in enumerate(views):
        geom = geoms[i] if geoms else ViewGeometry(scene, view)
        qmap, _ = geom.forward(scene.queries)
        for model in models:
            sl = scene.query_slice(model)
            pred = attend(qmap[:, :, sl], banks[model],
                          config.temperature_mode).rendered_features
            cos, l2 = cosine_l2_maps(pred, features[model][i])
            sums[model] += (cos, l2)
    return {m: {"cosine": float(v[0] / len(views)), "l2": float(v[1] / len(views))}
            for m, v in sums.items()}


def fit_memory(scene: GaussianScene, views, features, banks, config: TrainConfig,
               eval_views=None, eval_features=None):
    """Train query vectors and bank projections; returns (scene, banks, report).

    features maps model name -> one (h, w, d) ground-truth array per view.
    Geometry, colors, opacity, and the bank rows are left untouched.
    """
    config.validate()
    if not views:
        raise ConfigError("no training views")
    models = _validate_memory_inputs(scene, views, features, banks, config)
    if eval_views:
        _validate_memory_inputs(scene, eval_views, eval_features, banks, config)

    geoms = [ViewGeometry(scene, v) for v in views]
    adam_query = Adam(config.lr_query)
    adam_proj = {m: Adam(config.lr_w_m) for m in models}
    rng = np.random.default_rng(config.seed)
    report = TrainReport(iterations=config.iterations)
    start = time.perf_counter()

    for step in range(config.iterations):
        scene.validate_slices()
        view_idx = step % len(views)
        geom = geoms[view_idx]
        qmap, _ = geom.forward(scene.queries)
        n_pixels = geom.height * geom.width
        pix = _sample_pixels(rng, n_pixels, config.points_per_step)
        sampled_q = qmap.reshape(-1, scene.query_length)[pix]

        query_point_grad = np.zeros_like(sampled_q)
        proj_grads = {}
        per_model = {}
        total = 0.0
        for model in models:
            sl = scene.query_slice(model)
            bank = banks[model]
            q_rows = sampled_q[:, sl]
            pred = attend(q_rows, bank, config.temperature_mode).rendered_features
            gt_rows = features[model][view_idx].reshape(-1, bank.dim)[pix]
            loss_m, grad_pred = _point_loss_rows(pred, gt_rows,
                                                 config.lambda_cos, config.lambda_l2)
            grad_q, grad_w = attend_backward(q_rows, bank, grad_pred,
                                             config.temperature_mode)
            query_point_grad[:, sl] = grad_q
            proj_grads[model] = grad_w
            per_model[model] = loss_m
            total += loss_m

        if not np.isfinite(total):
            report.wall_clock = time.perf_counter() - start
            raise NumericalError(f"non-finite memory loss at step {step}")

        grad_map = np.zeros((n_pixels, scene.query_length))
        np.add.at(grad_map, pix, query_point_grad)
        grad_map = grad_map.reshape(geom.height, geom.width, -1)
        query_grad, _ = geom.backward(scene.queries, grad_map, len(scene))

        adam_query.step(scene.queries, query_grad)
        for model in models:
            adam_proj[model].step(banks[model].w_m, proj_grads[model])

        if step % config.log_interval == 0 or step == config.iterations - 1:
            report.record(step, total, per_model)

    report.wall_clock = time.perf_counter() - start
    if eval_views:
        report.final_eval = _eval_feature_maps(scene, eval_views, eval_features,
                                               banks, config)
    return scene, banks, report
