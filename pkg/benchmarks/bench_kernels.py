"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the toy model (3x3 convs in the decoder, 16x16 patch embedding on
a 64 px tile) plus a confusion count over a 512 x 512 raster. The fast
reshape paths in ``manet.kernels`` are bypassed so both backends do the work.
"""
import argparse
import timeit

import numpy as np

from manet import _kernels_py

try:
    from manet import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    x = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    cols = rng.standard_normal((8, 16 * 9, 32 * 32)).astype(np.float32)
    img = rng.standard_normal((8, 3, 64, 64)).astype(np.float32)
    truth = rng.integers(0, 6, 512 * 512).astype(np.int64)
    pred = rng.integers(0, 6, 512 * 512).astype(np.int64)
    return {
        "im2col 3x3 pad1 (8,16,32,32)": lambda m: m.im2col(x, 3, 1, 1),
        "col2im 3x3 pad1 (8,16,32,32)": lambda m: m.col2im(cols, 16, 32, 32, 3, 1, 1),
        "im2col 16x16 s16 (8,3,64,64)": lambda m: m.im2col(img, 16, 16, 0),
        "confusion 512x512, 6 classes": lambda m: m.confusion(truth, pred, 6),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels is not None else [])
    if _kernels is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':32s}" + "".join(f"{name:>12s}" for name, _ in backends) + ("     speedup" if _kernels else ""))
    for label, fn in cases(rng).items():
        if _kernels is not None:
            np.testing.assert_allclose(fn(_kernels_py), fn(_kernels), rtol=1e-5, atol=1e-5)
        times = [min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3 for _, mod in backends]
        row = f"{label:32s}" + "".join(f"{t:10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
