"""Numba-jitted 2D convolution kernels (default backend when available).

Same contracts as :mod:`multimod.kernels.numpy_backend`. The loops are
ordered so the innermost index walks the last (contiguous) axis of both the
output and the input, and the kernel tap value is hoisted out of the spatial
loops. The innermost loops deliberately run over the full output row with a
predicated bounds check rather than a precomputed sub-range: LLVM turns the
check into a masked select and vectorizes the constant-trip-count loop,
which measures several times faster than the dynamic-bounds variant. The
kernel gradient accumulates per-tap products into a row buffer (elementwise,
so it vectorizes where a scalar float reduction cannot) and collapses the
buffer once per tap. No ``fastmath`` and no ``prange``: with a single
thread the result is bitwise reproducible run to run, which the training
determinism guarantees rely on.

Importing this module raises ImportError when numba is missing; the package
``__init__`` falls back to the numpy backend in that case.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[oi, ci, ki, kj]
                        for yo in range(ho):
                            yi = yo * stride - pad + ki
                            if yi < 0 or yi >= h:
                                continue
                            base = kj - pad
                            for xo in range(wo):
                                xi = xo * stride + base
                                if 0 <= xi < wd:
                                    out[ni, oi, yo, xo] += wv * x[ni, ci, yi, xi]
    return out


@njit(cache=True)
def conv2d_grad_input(g, w, stride, pad, in_h, in_w):
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    gx = np.zeros((n, c, in_h, in_w), dtype=g.dtype)
    for ni in range(n):
        for oi in range(o):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[oi, ci, ki, kj]
                        for yo in range(ho):
                            yi = yo * stride - pad + ki
                            if yi < 0 or yi >= in_h:
                                continue
                            base = kj - pad
                            for xo in range(wo):
                                xi = xo * stride + base
                                if 0 <= xi < in_w:
                                    gx[ni, ci, yi, xi] += wv * g[ni, oi, yo, xo]
    return gx


@njit(cache=True)
def conv2d_grad_kernel(g, x, stride, pad, kh, kw):
    n, o, ho, wo = g.shape
    _, c, h, wd = x.shape
    gw = np.zeros((o, c, kh, kw), dtype=g.dtype)
    lane = np.zeros(wo, dtype=g.dtype)
    for oi in range(o):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    base = kj - pad
                    lane[:] = 0.0
                    for ni in range(n):
                        for yo in range(ho):
                            yi = yo * stride - pad + ki
                            if yi < 0 or yi >= h:
                                continue
                            for xo in range(wo):
                                xi = xo * stride + base
                                if 0 <= xi < wd:
                                    lane[xo] += g[ni, oi, yo, xo] * x[ni, ci, yi, xi]
                    acc = lane[0]
                    for xo in range(1, wo):
                        acc += lane[xo]
                    gw[oi, ci, ki, kj] = acc
    return gw
