"""Forward and backward rasterizer timings for the compiled and numpy backends.

    python3 benchmarks/bench_raster.py [--n 1000] [--res 64] [--repeat 3]

Both backends render the same cloud; the script also reports the largest
difference between their outputs and gradients.
"""
import argparse
import time

import numpy as np

from conceptsplat.camera import orbit_camera
from conceptsplat.gaussians import GaussianCloud, logit
from conceptsplat.render import backend, render, render_backward


def make_cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(rng.uniform(-0.4, 0.4, (n, 3)), rng.uniform(np.log(0.01), np.log(0.05), (n, 3)), q,
                         rng.uniform(logit(0.1), logit(0.9), n), rng.uniform(-1, 1, (n, 3)),
                         rng.integers(0, 2, n), 2)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    cloud = make_cloud(args.n)
    cam = orbit_camera(30.0, 20.0, 2.0, resolution=(args.res, args.res))
    gc = np.random.default_rng(1).normal(size=(args.res, args.res, 3))

    results = {}
    for name in backend.available():
        fwd = best_of(lambda: render(cloud, cam, backend_name=name), args.repeat)
        out = render(cloud, cam, backend_name=name)
        bwd = best_of(lambda: render_backward(out, gc), args.repeat)
        results[name] = (fwd, bwd, out, render_backward(out, gc).as_dict())
        print(f"{name:9s} forward {1e3 * fwd:9.2f} ms   backward {1e3 * bwd:9.2f} ms")

    if len(results) == 2:
        (pf, pb, po, pg), (cf, cb, co, cg) = results["python"], results["compiled"]
        print(f"speedup   forward {pf / cf:9.1f}x     backward {pb / cb:9.1f}x")
        d_img = np.abs(po.color - co.color).max()
        d_grad = max(np.abs(pg[k] - cg[k]).max() for k in pg)
        print(f"max |python - compiled|: image {d_img:.1e}, gradients {d_grad:.1e}")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
