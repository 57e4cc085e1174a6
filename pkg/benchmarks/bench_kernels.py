"""Time the compiled kernels against the numpy fallback on desk-model shapes.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each case first
checks that both backends agree (float64 sums to 1e-12, everything else
bitwise), then reports the median
wall time per call and the speedup of the compiled module.
"""

import argparse
import statistics
import sys
import timeit

import numpy as np

from normshift._kernels import compiled_backend, python_backend

# (batch, channels, height, width) entering the two conv and pool layers of the desk model
CONV_INPUTS = [(32, 3, 24, 24), (32, 16, 12, 12)]
POOL_INPUTS = [(32, 16, 24, 24), (32, 32, 12, 12)]
KERNEL, STRIDE, PAD = 3, 1, 1


def cases(rng):
    for n, c, h, w in CONV_INPUTS:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        tag = f"{n}x{c}x{h}x{w}"
        yield f"im2col {tag}", "im2col", (x, KERNEL, KERNEL, STRIDE, PAD)
        cols = python_backend.im2col(x, KERNEL, KERNEL, STRIDE, PAD)
        yield f"col2im {tag}", "col2im", (cols, n, c, h, w, KERNEL, KERNEL, STRIDE, PAD)
    for n, c, h, w in POOL_INPUTS:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        tag = f"{n}x{c}x{h}x{w}"
        yield f"maxpool_forward {tag}", "maxpool_forward", (x, 2, 2)
        pooled, arg = python_backend.maxpool_forward(x, 2, 2)
        grad = rng.standard_normal(pooled.shape).astype(np.float32)
        yield f"maxpool_backward {tag}", "maxpool_backward", (grad, arg, h, w, 2, 2)
        flat = x.reshape(n, c, h * w)
        mu, gamma, beta = (rng.standard_normal((n, c)).astype(np.float32) for _ in range(3))
        scale = rng.uniform(0.5, 2.0, (n, c)).astype(np.float32)
        yield f"affine_forward {tag}", "affine_forward", (flat, mu, scale, gamma, beta)
        yield f"affine_backward {tag}", "affine_backward", (flat, flat, mu, scale, gamma)


def median_seconds(fn, args, repeat):
    return statistics.median(timeit.repeat(lambda: fn(*args), number=5, repeat=repeat)) / 5


def same(a, b):
    # float64 reductions may differ in the last bits between backends
    if isinstance(a, tuple):
        return all(np.allclose(u, v, rtol=1e-12, atol=0) if u.dtype == np.float64 else np.array_equal(u, v)
                   for u, v in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    args = parser.parse_args(argv)
    if compiled_backend is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label, name, call_args in cases(rng):
        py_fn, c_fn = getattr(python_backend, name), getattr(compiled_backend, name)
        if not same(py_fn(*call_args), c_fn(*call_args)):
            print(f"{label}: backends disagree", file=sys.stderr)
            return 1
        t_py = median_seconds(py_fn, call_args, args.repeat)
        t_c = median_seconds(c_fn, call_args, args.repeat)
        print(f"{label:36s} {t_py * 1e3:10.3f} {t_c * 1e3:10.3f} {t_py / t_c:7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
