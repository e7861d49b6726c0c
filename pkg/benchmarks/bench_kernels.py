"""Time the numba kernels against their numpy fallbacks.

Each kernel is warmed up once per backend (so JIT compilation is excluded),
then timed ``--repeat`` times; the best time is reported together with the
speedup and the largest absolute difference between the two outputs.

    python3 benchmarks/bench_kernels.py --size 48 --repeat 5
"""
import argparse
import time

import numpy as np

from tumorsim import _accel
from tumorsim.losses import Decomposition, LossTarget, total_loss
from tumorsim.metrics import hausdorff_bruteforce
from tumorsim.shape.mesh import icosphere, perturb_mesh, place_mesh
from tumorsim.shape.noise import NoiseParams, simplex_noise
from tumorsim.shape.voxelize import voxelize, voxelize_ray_parity
from tumorsim.texture import TextureParams, elastic_deform, make_displacement
from tumorsim.volume import Volume


def build_cases(n):
    rng = np.random.default_rng(0)
    dims = (n, n, n)
    pts = rng.uniform(-2, 2, size=(n ** 3 // 2, 3))
    noise = NoiseParams(seed=1, octaves=3)
    mesh = place_mesh(perturb_mesh(icosphere(3), noise), (n / 2,) * 3, n / 3)
    vol = Volume(rng.uniform(0, 1, dims).astype(np.float32), (1, 1, 1))
    field = make_displacement(TextureParams(), rng, dims)
    m = rng.random(dims) > 0.5
    target = LossTarget(rng.normal(size=dims), rng.normal(size=dims), rng.normal(size=dims),
                        m.astype(np.float64), 0.7)
    d = Decomposition(rng.normal(size=dims), rng.normal(size=dims), rng.uniform(0, 1, dims))
    small = max(8, n // 3)
    a = rng.random((small,) * 3) > 0.5
    b = rng.random((small,) * 3) > 0.6
    return {
        "simplex noise": lambda: simplex_noise(pts, noise),
        "radial voxelize": lambda: voxelize(mesh, dims).data,
        "ray-parity oracle": lambda: voxelize_ray_parity(mesh, dims).data,
        "elastic warp": lambda: elastic_deform(vol, field).data,
        "loss + gradients": lambda: total_loss(d, target, gradients=True).gradients["m_hat"],
        "all-pairs hd95": lambda: np.float64(hausdorff_bruteforce(a, b)),
    }


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=32, help="grid edge length")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--only", help="run kernels whose name contains this string")
    args = ap.parse_args(argv)

    cases = build_cases(args.size)
    print(f"grid {args.size}^3, best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, fn in cases.items():
        if args.only and args.only not in name:
            continue
        res = {}
        for b in ("numpy", "numba"):
            _accel.set_backend(b)
            fn()  # warm-up / compile
            res[b] = best_time(fn, args.repeat)
        _accel.set_backend(None)
        diff = float(np.max(np.abs(np.asarray(res["numpy"][1], dtype=np.float64)
                                   - np.asarray(res["numba"][1], dtype=np.float64))))
        tn, tj = res["numpy"][0], res["numba"][0]
        print(f"{name:<20}{tn:>12.4f}{tj:>12.4f}{tn / tj:>9.1f}x{diff:>14.2e}")


if __name__ == "__main__":
    main()
