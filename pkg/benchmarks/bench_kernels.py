"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_kernels.py [--repetitions 10]

Prints mean seconds per call for each backend and the speedup of the
compiled one, and checks that both backends agree.
"""

import argparse

import numpy as np

from spatialpar.kernels import available_backends, get_backend
from spatialpar.perfmodel import time_kernel

SHAPES = [
    # n, c, h, w, f, k, s
    # per-rank shards as the executor sees them
    (1, 3, 10, 10, 4, 3, 1),
    (1, 4, 6, 18, 4, 5, 1),
    (2, 8, 12, 12, 8, 7, 2),
    # whole small layers
    (1, 3, 32, 32, 8, 3, 1),
    (2, 8, 32, 32, 8, 3, 1),
    (2, 8, 32, 32, 8, 5, 2),
    (4, 16, 16, 16, 16, 1, 1),
    (1, 3, 64, 64, 16, 7, 2),
]


def run_case(mod, shape, repetitions, rng):
    n, c, h, w, f, k, s = shape
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((f, c, k, k))
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    dy = rng.standard_normal((n, f, oh, ow))
    times = {
        "fp": time_kernel(lambda: mod.conv_fp_valid(x, wt, s), repetitions),
        "bp-filter": time_kernel(lambda: mod.conv_bpw_valid(x, dy, s, k), repetitions),
        "bp-data": time_kernel(lambda: mod.conv_bpx_full(dy, wt, s, h, w), repetitions),
    }
    outs = (mod.conv_fp_valid(x, wt, s), mod.conv_bpw_valid(x, dy, s, k), mod.conv_bpx_full(dy, wt, s, h, w))
    return times, outs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repetitions", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'shape (n,c,h,w,f,k,s)':<28}{'op':<11}" + "".join(f"{b:>12}" for b in backends)
          + ("     speedup" if len(backends) > 1 else ""))
    for shape in SHAPES:
        results = {}
        for b in backends:
            results[b] = run_case(get_backend(b), shape, args.repetitions, np.random.default_rng(args.seed))
        if len(backends) > 1:
            for a, b in zip(results["compiled"][1], results["python"][1]):
                np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)
        for op in ("fp", "bp-filter", "bp-data"):
            row = f"{str(shape):<28}{op:<11}" + "".join(f"{results[b][0][op]:12.2e}" for b in backends)
            if len(backends) > 1:
                row += f"{results['python'][0][op] / results['compiled'][0][op]:11.1f}x"
            print(row)


if __name__ == "__main__":
    main()
