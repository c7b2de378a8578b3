"""Timing comparison between the compiled and pure-python kernel backends.

Runs each hot kernel on training-shaped inputs and reports per-call time for
both implementations plus the speedup.  The compiled extension is optional;
without it only the python column is shown.
"""

import argparse
import time

import numpy as np

from ifwm import _kernels_np as pyk

try:
    from ifwm import _kernels as ck
except ImportError:
    ck = None


def bench(fn, args, reps):
    fn(*args)  # warm-up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def cases(dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 16, 64, 64)).astype(dtype)
    cols = pyk.im2col(x, 3, 1, 1)
    small = rng.standard_normal((8, 16, 32, 32)).astype(dtype)
    gy = rng.standard_normal((8, 16, 64, 64)).astype(dtype)
    flow = (rng.standard_normal((8, 2, 64, 64)) * 0.7).astype(dtype)
    return [
        ("im2col 8x16x64x64 k3", "im2col", (x, 3, 1, 1)),
        ("col2im 8x16x64x64 k3", "col2im", (cols, x.shape, 3, 1, 1)),
        ("upsample_fwd x2", "upsample_fwd", (small, 2)),
        ("upsample_bwd x2", "upsample_bwd", (gy, 2)),
        ("grid_sample_fwd", "grid_sample_fwd", (small, flow)),
        ("grid_sample_bwd", "grid_sample_bwd", (gy, small, flow)),
    ]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    args = ap.parse_args(argv)
    dtype = np.float64 if args.dtype == "f64" else np.float32

    print(f"dtype={args.dtype} reps={args.reps}")
    header = f"{'kernel':26s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for label, name, fn_args in cases(dtype):
        t_py = bench(getattr(pyk, name), fn_args, args.reps)
        if ck is None:
            print(f"{label:26s} {t_py * 1e3:9.2f}ms {'n/a':>10s} {'-':>8s}")
        else:
            t_c = bench(getattr(ck, name), fn_args, args.reps)
            print(f"{label:26s} {t_py * 1e3:9.2f}ms {t_c * 1e3:9.2f}ms "
                  f"{t_py / t_c:7.1f}x")
    if ck is None:
        print("compiled backend not built; showing python fallback only")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
