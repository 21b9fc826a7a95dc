"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes mirror the CNN's first blocks (8x32x32 inputs, batch 50) and the
reduced-input gather. Prints the median time per call and the speedup; the
two backends' outputs are compared before timing.
"""
import argparse
import timeit

import numpy as np

from fcdcast import _pykernels as py

try:
    from fcdcast import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def cases(rng):
    x = rng.normal(size=(50, 8, 32, 32))
    cols = py.im2col(x, 3, 1, 1)
    pooled_in = rng.normal(size=(50, 32, 32, 32))
    out, arg = py.maxpool_forward(pooled_in, 2, 2)
    dout = rng.normal(size=out.shape)
    values = rng.random((396, 480 * 30))
    rows = rng.integers(0, 396, size=5000)
    starts = rng.integers(0, values.shape[1] - 20, size=5000)
    return {
        "im2col 50x8x32x32 r3": ("im2col", (x, 3, 1, 1)),
        "col2im 50x8x32x32 r3": ("col2im", (cols, x.shape, 3, 1, 1)),
        "maxpool fwd 50x32x32x32": ("maxpool_forward", (pooled_in, 2, 2)),
        "maxpool bwd 50x32x32x32": ("maxpool_backward", (dout, arg, pooled_in.shape)),
        "gather 5000 x 20 slots": ("gather_rows", (values, rows, starts, 20)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=0, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for label, (name, call_args) in cases(rng).items():
        f_py = getattr(py, name)
        t_py = min(timeit.repeat(lambda: f_py(*call_args), number=1, repeat=args.repeat))
        if cy is None:
            print(f"{label:<26}{1e3 * t_py:>10.2f}{'n/a':>11}{'':>9}")
            continue
        f_cy = getattr(cy, name)
        if not _same(f_py(*call_args), f_cy(*call_args)):
            raise SystemExit(f"{label}: backends disagree")
        t_cy = min(timeit.repeat(lambda: f_cy(*call_args), number=1, repeat=args.repeat))
        print(f"{label:<26}{1e3 * t_py:>10.2f}{1e3 * t_cy:>11.2f}{t_py / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
