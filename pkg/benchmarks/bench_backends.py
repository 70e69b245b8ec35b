"""Timing comparison of the numba kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_backends.py [--prims N] [--size PX] [--rows N]

Covers the three hot paths: compositing forward, compositing backward, and
the greedy similarity reduction. The first jitted call compiles (cached on
disk), so each kernel is warmed before timing.
"""

import argparse
import time

import numpy as np

from splatmem.backend import jitted, reference
from splatmem.memory import FeatureTensor, reduce_similarity
from splatmem.rasterizer import ViewGeometry
from splatmem.scene import GaussianScene, CameraView


def _scene(rng, n, channels):
    quats = rng.standard_normal((n, 4))
    opac = rng.uniform(0.3, 0.9, n)
    return GaussianScene(
        centroids=rng.uniform(-2.0, 2.0, (n, 3)) * np.array([1.0, 1.0, 0.4]),
        rotations=quats,
        log_scales=np.log(rng.uniform(0.05, 0.25, (n, 3))),
        opacity_logits=np.log(opac / (1.0 - opac)),
        color_sh=rng.standard_normal((n, 3)) * 0.5,
        queries=rng.standard_normal((n, channels)),
        model_slices={"bench": (0, channels)},
    )


def _camera(size):
    w2c = np.eye(4)
    w2c[2, 3] = 6.0
    return CameraView(fx=1.6 * size, fy=1.6 * size, cx=size / 2.0, cy=size / 2.0,
                      world_to_camera=w2c, width=size, height=size)


def _time(fn, repeats=5):
    fn()  # warm up (jit compile / cache load)
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--prims", type=int, default=4000)
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--rows", type=int, default=20000)
    parser.add_argument("--dim", type=int, default=64)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    scene = _scene(rng, args.prims, channels=8)
    camera = _camera(args.size)
    geom = ViewGeometry(scene, camera)
    payload = np.ascontiguousarray(scene.queries[geom.order])
    kernel_args = (geom.tile_entries, geom.tile_start, geom.tiles_x,
                   camera.height, camera.width, geom.means2d, geom.conic,
                   geom.opacity, payload)
    grad = rng.standard_normal((camera.height, camera.width, 8))

    rows = rng.standard_normal((args.rows, args.dim)).astype(np.float32)
    tensor = FeatureTensor(model_name="bench", n_views=1, height=1,
                           width=args.rows, data=rows)

    print(f"scene: {args.prims} primitives, {args.size}x{args.size} px, "
          f"{len(geom.tile_entries)} tile entries")
    print(f"reduction: {args.rows} rows x {args.dim} dims\n")
    print(f"{'kernel':<22} {'numba':>10} {'numpy':>10} {'speedup':>9}")

    rows_spec = [
        ("composite forward",
         lambda: jitted.composite_forward(*kernel_args),
         lambda: reference.composite_forward(*kernel_args)),
        ("composite backward",
         lambda: jitted.composite_backward(*kernel_args, grad),
         lambda: reference.composite_backward(*kernel_args, grad)),
    ]
    for name, jit_fn, ref_fn in rows_spec:
        jit_t = _time(jit_fn)
        ref_t = _time(ref_fn)
        print(f"{name:<22} {jit_t * 1e3:>8.1f}ms {ref_t * 1e3:>8.1f}ms "
              f"{ref_t / jit_t:>8.1f}x")

    # the end-to-end reduction is dominated by the shared similarity matmul,
    # so time the per-chunk decision kernel on a precomputed block
    unit = rows.astype(np.float64)
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    block = unit[:2048] @ unit.T
    buf = np.empty(2048, dtype=np.int64)

    def decide(impl):
        used = np.zeros(args.rows, dtype=np.uint8)
        impl.reduce_decide(block, used, 0.85, 0, buf)

    jit_t = _time(lambda: decide(jitted), repeats=3)
    ref_t = _time(lambda: decide(reference), repeats=3)
    print(f"{'reduce decision pass':<22} {jit_t * 1e3:>8.1f}ms {ref_t * 1e3:>8.1f}ms "
          f"{ref_t / jit_t:>8.1f}x")

    import splatmem.backend as backend_mod

    def reduce_with(impl):
        original = backend_mod.reduce_decide
        backend_mod.reduce_decide = impl.reduce_decide
        try:
            reduce_similarity(tensor, theta=0.85, chunk=1024)
        finally:
            backend_mod.reduce_decide = original

    jit_t = _time(lambda: reduce_with(jitted), repeats=3)
    ref_t = _time(lambda: reduce_with(reference), repeats=3)
    print(f"{'reduce end-to-end':<22} {jit_t * 1e3:>8.1f}ms {ref_t * 1e3:>8.1f}ms "
          f"{ref_t / jit_t:>8.1f}x  (matmul-bound)")


if __name__ == "__main__":
    main()
