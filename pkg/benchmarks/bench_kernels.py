"""Compare the numba and numpy convolution backends.

Runs forward, input-gradient, and kernel-gradient convolutions at a few
realistic shapes on both backends, checks they agree, and prints a table
of per-call wall times with the speedup ratio. Invoke from the repo root:

    python3 benchmarks/bench_kernels.py [--repeats N]

The backends are imported directly (not through the dispatch layer) so a
single process can time both.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from multimod.kernels import numba_backend, numpy_backend

# (label, batch, c_in, c_out, height, width, tap, stride)
SHAPES = [
    ("stem 64px", 4, 3, 16, 64, 64, 3, 2),
    ("stage 32px", 4, 16, 32, 32, 32, 3, 1),
    ("deep 16px", 4, 64, 64, 16, 16, 3, 1),
    ("1x1 proj", 4, 64, 8, 16, 16, 1, 1),
]


def _time(fn, args, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench(repeats: int) -> None:
    rng = np.random.default_rng(0)
    header = f"{'case':<28}{'numpy':>10}{'numba':>10}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for label, n, ci, co, h, w, k, stride in SHAPES:
        pad = k // 2
        x = rng.standard_normal((n, ci, h, w)).astype(np.float32)
        kern = rng.standard_normal((co, ci, k, k)).astype(np.float32)
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        g = rng.standard_normal((n, co, ho, wo)).astype(np.float32)

        cases = [
            ("fwd", "conv2d_forward", (x, kern, stride, pad)),
            ("gx", "conv2d_grad_input", (g, kern, stride, pad, h, w)),
            ("gw", "conv2d_grad_kernel", (g, x, stride, pad, k, k)),
        ]
        for tag, name, args in cases:
            f_np = getattr(numpy_backend, name)
            f_nb = getattr(numba_backend, name)
            ref = f_np(*args)
            got = f_nb(*args)
            scale = max(1.0, float(np.max(np.abs(ref))))
            err = float(np.max(np.abs(ref - got))) / scale
            if err > 1e-5:  # float32 accumulation-order noise only
                raise AssertionError(f"{label} {tag}: backends disagree by {err:.2e}")
            f_nb(*args)  # warm the JIT cache before timing
            t_np = _time(f_np, args, repeats)
            t_nb = _time(f_nb, args, repeats)
            print(
                f"{label + ' ' + tag:<28}{t_np * 1e3:>8.2f}ms{t_nb * 1e3:>8.2f}ms"
                f"{t_np / t_nb:>8.1f}x"
            )


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    bench(args.repeats)


if __name__ == "__main__":
    main()
