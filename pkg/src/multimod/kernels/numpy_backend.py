"""Pure-numpy 2D convolution kernels (fallback backend).

Each routine is expressed as a sum over kernel taps of strided slices, with
the channel contraction handed to einsum. This keeps memory flat (no im2col
blow-up) while staying reasonably fast for the small feature maps this
package works at.

All arrays are NCHW / OIKK float32 or float64; the three routines are the
forward product, the gradient w.r.t. the input and the gradient w.r.t. the
kernel of the same convolution (stride ``s``, symmetric zero padding ``p``).
"""

from __future__ import annotations

import numpy as np


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            sliced = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            out += np.einsum("nchw,oc->nohw", sliced, w[:, :, ki, kj], optimize=True)
    return out


def conv2d_grad_input(
    g: np.ndarray, w: np.ndarray, stride: int, pad: int, in_h: int, in_w: int
) -> np.ndarray:
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    gxp = np.zeros((n, c, in_h + 2 * pad, in_w + 2 * pad), dtype=g.dtype)
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += np.einsum(
                "nohw,oc->nchw", g, w[:, :, ki, kj], optimize=True
            )
    if pad:
        gxp = gxp[:, :, pad : pad + in_h, pad : pad + in_w]
    return np.ascontiguousarray(gxp)


def conv2d_grad_kernel(
    g: np.ndarray, x: np.ndarray, stride: int, pad: int, kh: int, kw: int
) -> np.ndarray:
    n, o, ho, wo = g.shape
    _, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gw = np.empty((o, c, kh, kw), dtype=g.dtype)
    for ki in range(kh):
        for kj in range(kw):
            sliced = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            gw[:, :, ki, kj] = np.einsum("nohw,nchw->oc", g, sliced, optimize=True)
    return gw
