"""Differentiable operations on :class:`~multimod.tensor.Tensor`.

Every op validates shapes eagerly with a descriptive error, computes its
result in numpy (convolutions dispatch to :mod:`multimod.kernels`), and, when
recording is on, attaches a backward closure. Closures capture plain numpy
arrays rather than the output tensor, so graphs are reference-cycle free.

Shape rules are deliberately strict: elementwise ops require identical
shapes, there is no implicit broadcasting anywhere. Anything shaped is
spelled out (``repeat_batch``, per-channel bias inside ``conv2d``).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, accumulate_grad, make_node


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = make_node(a.data + b.data, (a, b))
    if out.requires_grad:

        def _bw(g):
            if a.requires_grad:
                accumulate_grad(a, g)
            if b.requires_grad:
                accumulate_grad(b, g)

        out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = make_node(a.data - b.data, (a, b))
    if out.requires_grad:

        def _bw(g):
            if a.requires_grad:
                accumulate_grad(a, g)
            if b.requires_grad:
                accumulate_grad(b, -g)

        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (strict same-shape)."""
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = make_node(ad * bd, (a, b))
    if out.requires_grad:

        def _bw(g):
            if a.requires_grad:
                accumulate_grad(a, g * bd)
            if b.requires_grad:
                accumulate_grad(b, g * ad)

        out._backward = _bw
    return out


def scale(a: Tensor, s) -> Tensor:
    """Multiply by a python float or a scalar (size-1) tensor."""
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise ValueError(f"scale: scale factor must be scalar, got shape {s.shape}")
        ad, sd = a.data, s.data
        out = make_node(ad * sd.reshape(()), (a, s))
        if out.requires_grad:

            def _bw(g):
                if a.requires_grad:
                    accumulate_grad(a, g * sd.reshape(()))
                if s.requires_grad:
                    accumulate_grad(s, np.asarray((g * ad).sum()).reshape(sd.shape))

            out._backward = _bw
        return out
    f = float(s)
    out = make_node(a.data * f, (a,))
    if out.requires_grad:

        def _bw(g):
            accumulate_grad(a, g * f)

        out._backward = _bw
    return out


def one_minus(a: Tensor) -> Tensor:
    """Complement ``1 - a`` (the other side of a convex gate)."""
    out = make_node(1.0 - a.data, (a,))
    if out.requires_grad:

        def _bw(g):
            accumulate_grad(a, -g)

        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    out = make_node(np.maximum(a.data, 0), (a,))
    if out.requires_grad:
        mask = a.data > 0

        def _bw(g):
            accumulate_grad(a, g * mask)

        out._backward = _bw
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = make_node(y, (a,))
    if out.requires_grad:

        def _bw(g):
            accumulate_grad(a, g * (1.0 - y * y))

        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = make_node(y, (a,))
    if out.requires_grad:

        def _bw(g):
            accumulate_grad(a, g * y * (1.0 - y))

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# movement / shape


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}") from None
    out = make_node(data, (a,))
    if out.requires_grad:
        in_shape = a.shape

        def _bw(g):
            accumulate_grad(a, g.reshape(in_shape))

        out._backward = _bw
    return out


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    out = make_node(np.transpose(a.data, axes), (a,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))

        def _bw(g):
            accumulate_grad(a, np.transpose(g, inverse))

        out._backward = _bw
    return out


def flip(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"flip: axis {axis} out of range for ndim {a.ndim}")
    out = make_node(np.ascontiguousarray(np.flip(a.data, axis)), (a,))
    if out.requires_grad:

        def _bw(g):
            accumulate_grad(a, np.flip(g, axis))

        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    ndim = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ValueError("concat: rank mismatch")
        for ax in range(ndim):
            if ax != axis % ndim and t.shape[ax] != tensors[0].shape[ax]:
                raise ValueError(
                    f"concat: shapes {tensors[0].shape} and {t.shape} "
                    f"differ outside axis {axis}"
                )
    out = make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.shape[axis % ndim] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        ts = tuple(tensors)

        def _bw(g):
            for t, piece in zip(ts, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    accumulate_grad(t, piece)

        out._backward = _bw
    return out


def repeat_batch(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    if n < 1:
        raise ValueError(f"repeat_batch: n must be positive, got {n}")
    out = make_node(np.ascontiguousarray(np.broadcast_to(a.data, (n,) + a.shape)), (a,))
    if out.requires_grad:

        def _bw(g):
            accumulate_grad(a, g.sum(axis=0))

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = make_node(a.data.sum(), (a,))
    if out.requires_grad:
        shape = a.shape

        def _bw(g):
            accumulate_grad(a, np.broadcast_to(g, shape))

        out._backward = _bw
    return out


def mean_all(a: Tensor) -> Tensor:
    out = make_node(a.data.mean(), (a,))
    if out.requires_grad:
        shape = a.shape
        inv = 1.0 / a.size

        def _bw(g):
            accumulate_grad(a, np.broadcast_to(g * inv, shape))

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product or batched 3D product (leading axis must match)."""
    if a.ndim == b.ndim == 2:
        pass
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"matmul: batch mismatch {a.shape[0]} vs {b.shape[0]}")
    else:
        raise ValueError(f"matmul: expected both 2D or both 3D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = make_node(ad @ bd, (a, b))
    if out.requires_grad:

        def _bw(g):
            if a.requires_grad:
                accumulate_grad(a, g @ bd.swapaxes(-1, -2))
            if b.requires_grad:
                accumulate_grad(b, ad.swapaxes(-1, -2) @ g)

        out._backward = _bw
    return out


def row_normalize(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each last-axis row by (its sum + eps).

    Rows of non-negative entries come out summing to s/(s+eps), i.e. to 1 up
    to the guard for any healthy row; an all-zero row stays all-zero instead
    of dividing by zero.
    """
    s = a.data.sum(axis=-1, keepdims=True)
    denom = s + eps
    y = a.data / denom
    out = make_node(y, (a,))
    if out.requires_grad:

        def _bw(g):
            accumulate_grad(a, (g - (g * y).sum(axis=-1, keepdims=True)) / denom)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2D convolution, NCHW input, OIKK kernel, odd square taps.

    ``pad`` is symmetric zero padding; output spatial size must be >= 1.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be OIKK, got shape {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ValueError(f"conv2d: kernel expects {ci} input channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel taps must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: bad stride/pad ({stride}, {pad})")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: output would be {ho}x{wo} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")

    xd = np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kernel.data)
    y = kernels.conv2d_forward(xd, kd, stride, pad)
    if bias is not None:
        y += bias.data.reshape(1, o, 1, 1)
        out = make_node(y, (x, kernel, bias))
    else:
        out = make_node(y, (x, kernel))
    if out.requires_grad:

        def _bw(g):
            g = np.ascontiguousarray(g)
            if x.requires_grad:
                accumulate_grad(x, kernels.conv2d_grad_input(g, kd, stride, pad, h, w))
            if kernel.requires_grad:
                accumulate_grad(kernel, kernels.conv2d_grad_kernel(g, xd, stride, pad, kh, kw))
            if bias is not None and bias.requires_grad:
                accumulate_grad(bias, g.sum(axis=(0, 2, 3)))

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# batch normalisation


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of an NCHW tensor.

    Train mode normalises with biased batch statistics, differentiates
    through them, and updates the running buffers in place as
    ``running = (1 - momentum) * running + momentum * batch``. Eval mode
    treats the running buffers as constants.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")

    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError(
                f"batchnorm2d: train mode needs >= 2 values per channel, got {m}"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = make_node(gd * xhat + bd, (x, gamma, beta))
        if out.requires_grad:

            def _bw(g):
                if gamma.requires_grad:
                    accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
                if beta.requires_grad:
                    accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
                if x.requires_grad:
                    gmean = g.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    gxhat_mean = (g * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    gx = (gd * inv_std.reshape(1, c, 1, 1)) * (g - gmean - xhat * gxhat_mean)
                    accumulate_grad(x, gx)

            out._backward = _bw
        return out

    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = make_node(gd * xhat + bd, (x, gamma, beta))
    if out.requires_grad:

        def _bw(g):
            if gamma.requires_grad:
                accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                accumulate_grad(x, g * gd * inv_std.reshape(1, c, 1, 1))

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# bilinear resize


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-stochastic 1D bilinear interpolation matrix (half-pixel centres).

    Output sample j reads from real coordinate max(0, (j+0.5)*n_in/n_out -
    0.5); the two taps are floor and floor+1 clamped to the last sample.
    """
    r = np.zeros((n_out, n_in), dtype=np.float64)
    scl = n_in / n_out
    for j in range(n_out):
        src = max((j + 0.5) * scl - 0.5, 0.0)
        i0 = int(src)
        i1 = i0 + 1 if i0 < n_in - 1 else i0
        t = src - i0
        r[j, i0] += 1.0 - t
        r[j, i1] += t
    return r.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize an NCHW tensor spatially with half-pixel-centre bilinear taps.

    Linear in the input, so the exact gradient is the transposed
    interpolation applied to the output gradient. A same-size resize is the
    identity (bitwise).
    """
    if x.ndim != 4:
        raise ValueError(f"bilinear_resize: input must be NCHW, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: bad target size {out_h}x{out_w}")
    n, c, h, w = x.shape
    if out_h == h and out_w == w:
        out = make_node(x.data.copy(), (x,))
        if out.requires_grad:

            def _bw_id(g):
                accumulate_grad(x, g)

            out._backward = _bw_id
        return out

    ry = _interp_matrix(out_h, h, x.dtype)
    rx = _interp_matrix(out_w, w, x.dtype)
    out = make_node(ry @ x.data @ rx.T, (x,))
    if out.requires_grad:

        def _bw(g):
            accumulate_grad(x, ry.T @ g @ rx)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# operator sugar on Tensor (strict, no broadcasting)

Tensor.__add__ = lambda self, other: add(self, _as_tensor(other))
Tensor.__sub__ = lambda self, other: sub(self, _as_tensor(other))
Tensor.__mul__ = lambda self, other: (
    scale(self, other) if isinstance(other, (int, float)) else mul(self, _as_tensor(other))
)
Tensor.__rmul__ = Tensor.__mul__
