"""Time the compiled kernels against the numpy fallback on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N time for each backend and
the speedup. Backends that fail to import are skipped.
"""

import argparse
import timeit

import numpy as np

from dofield import kernels
from dofield.chain import camera_rays, capsule_arrays, default_camera, forward_kinematics
from dofield.presets import chain_from, preset
from dofield.mc_tables import TRI_TABLE


def cases():
    rng = np.random.default_rng(0)
    R, N = 256, 64  # one training batch worth of rays
    sigma = rng.exponential(2.0, (R, N)).astype(np.float32)
    delta = rng.uniform(0.005, 0.05, (R, N)).astype(np.float32)
    color = np.zeros_like(sigma)
    g = rng.random(R).astype(np.float32)

    spec = chain_from(preset("desk3dof"))
    cam = default_camera(spec, 64, 64)
    o, d = camera_rays(cam)
    a, b, r = capsule_arrays(forward_kinematics(spec, [0.3, 0.4, -0.6]))
    near, far = np.full(len(o), cam.near), np.full(len(o), cam.far)
    pts = rng.uniform(-0.7, 0.7, (20000, 3))

    w = rng.random((R, N))
    edges = np.sort(rng.random((R, N + 1)), axis=1)
    u = rng.random((R, N))

    ax = np.linspace(-1, 1, 48)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    vol = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)

    def composite(m):
        pix, wt, T = m.composite_forward(sigma, delta, color, 1.0)
        m.composite_backward(g, delta, color, 1.0, wt, T)

    return {
        "composite fwd+bwd 256x64": composite,
        "sample_pdf 256x64": lambda m: m.sample_pdf(w, edges, u),
        "segment_hits 64x64 image": lambda m: m.segment_hits(o, d, near, far, a, b, r),
        "capsule_sdf 20k points": lambda m: m.capsule_sdf(pts, a, b, r),
        "marching_cubes 48^3": lambda m: m.marching_cubes(vol, 0.5, TRI_TABLE),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats (best is reported)")
    args = ap.parse_args(argv)
    backends = kernels.backends()
    names = sorted(backends)
    print(f"{'kernel':28s}" + "".join(f"{n:>12s}" for n in names) + "   speedup")
    for label, fn in cases().items():
        times = {}
        for n in names:
            m = backends[n]
            fn(m)  # warm up
            number = 3
            times[n] = min(timeit.repeat(lambda: fn(m), number=number, repeat=args.repeat)) / number
        row = f"{label:28s}" + "".join(f"{times[n] * 1e3:10.2f}ms" for n in names)
        if "compiled" in times:
            row += f"   {times['python'] / times['compiled']:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
