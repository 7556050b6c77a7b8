"""Timings for the compiled vs pure-python kernel backends.

Runs each hot kernel on attack-sized inputs plus one whole-frame render and
prints a table of per-call times and the compiled speedup. Usage:

    python benchmarks/bench_kernels.py [--repeat 50] [--image-size 64]
"""

import argparse
import time

import numpy as np

from advtex import _kernels as K
from advtex import geometry as geo
from advtex import policy as pol
from advtex import render as rd


def _time(fn, repeat):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def kernel_cases(image_size, rng):
    """name -> impl-module -> no-arg callable, sized like one attack step."""
    n_tri = 160
    xy = rng.uniform(-8.0, image_size + 8.0, (n_tri, 3, 2))
    z = rng.uniform(0.1, 3.0, (n_tri, 3))

    x = rng.normal(size=(1, 3, image_size, image_size))
    w1 = rng.normal(size=(8, 3, 5, 5))
    b1 = np.zeros(8)
    y1 = K.get_backend(K.BACKEND).conv2d_forward(x, w1, b1, 2)
    gy = rng.normal(size=y1.shape)

    n_px = image_size * image_size
    tex = rng.uniform(size=(32, 32, 3))
    iy0 = rng.integers(0, 31, n_px)
    ix0 = rng.integers(0, 31, n_px)
    fy = rng.uniform(0.0, 1.0, n_px)
    fx = rng.uniform(0.0, 1.0, n_px)
    gout = rng.normal(size=(n_px, 3))

    return {
        "raster_triangles": lambda impl: impl.raster_triangles(xy, z, image_size, image_size),
        "conv2d_forward": lambda impl: impl.conv2d_forward(x, w1, b1, 2),
        "conv2d_grad_input": lambda impl: impl.conv2d_grad_input(gy, w1, 2, image_size, image_size),
        "conv2d_grad_weight": lambda impl: impl.conv2d_grad_weight(gy, x, 2, 5, 5),
        "bilinear_gather": lambda impl: impl.bilinear_gather(tex, iy0, ix0, fy, fx),
        "bilinear_scatter": lambda impl: impl.bilinear_scatter(gout, iy0, ix0, fy, fx, 32, 32),
    }


def frame_case(image_size):
    objects = rd.default_objects()
    cfg = geo.sample_scene(5, 0.35, geo.Workspace(), config_id=0)
    scene = rd.build_scene(objects, cfg)
    ee = geo.to_pose(cfg.ee_init, rd.adv_center(objects, cfg))
    intr = rd.CameraIntrinsics.square(image_size)
    textures = rd.default_textures()
    return lambda: rd.rasterize(scene, ee, intr, textures)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=50, help="timed calls per kernel")
    parser.add_argument("--image-size", type=int, default=64, help="square image resolution")
    args = parser.parse_args(argv)

    backends = K.available_backends()
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.image_size, rng)

    header = f"{'kernel':<22}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, call in cases.items():
        times = {b: _time(lambda b=b: call(K.get_backend(b)), args.repeat) for b in backends}
        row = f"{name:<22}" + "".join(f"{times[b] * 1e3:>14.3f}" for b in backends)
        if len(backends) == 2:
            row += f"{times[backends[1]] / times[backends[0]]:>9.1f}x"
        print(row)

    # whole frame through the active backend only: render is not
    # backend-parameterized, so this row shows the end-to-end effect.
    frame = frame_case(args.image_size)
    t = _time(frame, max(5, args.repeat // 5))
    print("-" * len(header))
    print(f"{'full rasterize':<22}{t * 1e3:>14.3f}  (active backend: {K.BACKEND})")


if __name__ == "__main__":
    main()
