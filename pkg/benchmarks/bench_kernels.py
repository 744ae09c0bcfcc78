"""Time each kernel under the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call per kernel (compilation) is excluded; results report the
best of ``--repeat`` runs and check that both backends agree.
"""
import argparse
import time

import numpy as np

from tryonlab import kernels, synthgen
from tryonlab.flowwarp import fields


def _cases(rng):
    H, W = 64, 48
    img = rng.random((H, W, 3))
    flow = rng.normal(0, 3, (H, W, 2))
    grid = fields.identity_grid((H, W)).reshape(-1, 2)
    src = synthgen.torso_lattice((H, W))
    dst = src + rng.normal(0, 1.5, src.shape)
    w, a = fields.tps_fit(src, dst - src)
    poly = synthgen.garment_template((H, W))
    return {
        "warp_bilinear": (kernels.warp_bilinear, (img, flow)),
        "lookup_clamped": (kernels.lookup_clamped, (flow, grid + flow.reshape(-1, 2))),
        "tps_eval": (kernels.tps_eval, (grid, src, w, a)),
        "tps_invert": (kernels.tps_invert, (grid, src, w, a)),
        "raster_polygon": (kernels.raster_polygon, (poly, (H, W))),
    }


def _best(fn, args, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    cases = _cases(np.random.default_rng(0))
    prev = kernels.backend()
    print(f"{'kernel':16s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  agree")
    try:
        for name, (fn, fargs) in cases.items():
            kernels.set_backend("numba")
            fn(*fargs)  # compile
            t_nb, out_nb = _best(fn, fargs, args.repeat)
            kernels.set_backend("numpy")
            t_np, out_np = _best(fn, fargs, args.repeat)
            a = out_nb if isinstance(out_nb, tuple) else (out_nb,)
            b = out_np if isinstance(out_np, tuple) else (out_np,)
            agree = all(np.allclose(x, y, atol=1e-8) for x, y in zip(a, b))
            print(f"{name:16s} {1e3 * t_nb:10.3f} {1e3 * t_np:10.3f} {t_np / t_nb:8.1f}x  {agree}")
    finally:
        kernels.set_backend(prev)


if __name__ == "__main__":
    main()
