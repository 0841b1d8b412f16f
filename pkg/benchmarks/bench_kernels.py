"""Time the compiled and numpy convolution kernels on model-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from a2fm._kernels import pykernels

try:
    from a2fm._kernels import _ckernels
except ImportError:
    _ckernels = None

# (name, per-clip input shape, kernel shape): the layers of the default toy models
LAYERS = [
    ("conv1 3x3x3", (14, 16, 16, 1), (3, 3, 3, 1, 6)),
    ("conv2 3x3x3", (14, 8, 8, 6), (3, 3, 3, 6, 8)),
    ("spatial 1x3x3", (14, 16, 16, 6), (1, 3, 3, 6, 6)),
    ("temporal 3x1x1", (14, 8, 8, 8), (3, 1, 1, 8, 8)),
]
# attacks run one clip at a time, training uses batches of 8
CASES = [(f"{name} B={b}", (b,) + shape, ws) for b in (1, 8) for name, shape, ws in LAYERS]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    impls = [("numpy", pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'case':<20}{'pass':<10}" + "".join(f"{n + ' ms':>12}" for n, _ in impls) + ("     speedup" if len(impls) > 1 else ""))
    for name, xs, ws in CASES:
        x, w = rng.normal(size=xs), rng.normal(size=ws)
        b = rng.normal(size=ws[-1])
        g = rng.normal(size=xs[:4] + (ws[-1],))
        for label, call in (
            ("forward", lambda m: m.conv3d_forward(x, w, b)),
            ("backward", lambda m: m.conv3d_backward(x, w, g, True, True)),
        ):
            times = [bench(lambda m=m: call(m), args.repeat) for _, m in impls]
            line = f"{name:<20}{label:<10}" + "".join(f"{t:12.2f}" for t in times)
            if len(times) > 1:
                line += f"{times[0] / times[1]:11.1f}x"
            print(line)
    if _ckernels is None:
        print("compiled kernels not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
