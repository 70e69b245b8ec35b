"""Gaussian-splat scene memory.

A scene is stored as 3D Gaussian primitives that carry, besides the usual
geometry/appearance attributes, a low-dimensional learnable query vector.
High-dimensional per-view feature maps are deduplicated into a compact
memory bank; rasterized query vectors index that bank through softmax
attention to reconstruct full-dimensional feature maps per pixel.
"""

from splatmem.scene import (
    CameraView,
    GaussianPrimitive,
    GaussianScene,
    init_scene_from_points,
    load_scene,
    save_scene,
)
from splatmem.memory import (
    FeatureTensor,
    MemoryBank,
    init_projection,
    load_bank,
    reduce_similarity,
    save_bank,
)
from splatmem.attention import AttentionOutput, attend, attend_backward, trace_top_k
from splatmem.rasterizer import (
    RenderGradients,
    RenderOutput,
    SplatFragment,
    backward_render,
    composite_pixel,
    project,
    render_view,
)
from splatmem.training import (
    TrainConfig,
    TrainReport,
    fit_appearance,
    fit_memory,
    point_feature_loss,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionOutput",
    "CameraView",
    "FeatureTensor",
    "GaussianPrimitive",
    "GaussianScene",
    "MemoryBank",
    "RenderGradients",
    "RenderOutput",
    "SplatFragment",
    "TrainConfig",
    "TrainReport",
    "attend",
    "attend_backward",
    "backward_render",
    "composite_pixel",
    "fit_appearance",
    "fit_memory",
    "init_projection",
    "init_scene_from_points",
    "load_bank",
    "load_scene",
    "point_feature_loss",
    "project",
    "reduce_similarity",
    "render_view",
    "save_bank",
    "save_scene",
    "trace_top_k",
]
