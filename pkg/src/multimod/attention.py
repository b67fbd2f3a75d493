"""Pyramid attention over multi-view keys, and the fusion of its output.

One modality's encoder emits a three-level pyramid (strides 4/8/16). The
attention head projects each level into a shared latent width:

* query  -- from the stride-4 level, one row per fine pixel,
* context -- from the stride-8 level; its channel co-occurrence
  ``tanh(Z^T Z)`` plus a learned additive channel map modulates the query,
* keys   -- from the stride-16 level, once per spatial view.

Each view (identity, transpose, vertical flip) rearranges the deep grid
*before* the shared projection and the keys are left in view order, so a
query can match a deep pixel through its transposed or flipped coordinates;
the per-view scores are blended with learned scalar weights, rectified, and
row-normalised into attention over deep pixels. The attended deep features
are projected to the fused width and added to a convolutional merge of the
upsampled latents.

Rows whose pre-normalisation mass is below ``GUARD_THRESHOLD`` are "guarded":
the epsilon in the normaliser keeps them finite (an all-dead row stays zero
rather than dividing by zero) at the cost of not summing to one. Healthy
rows sum to one within 1e-5. :class:`AttentionStats` counts guarded rows so
callers can monitor how often this happens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .blocks import (
    BatchNorm,
    ConvBlock,
    conv_bn_relu,
    he_normal,
    make_batchnorm,
    make_conv_block,
)
from .ops import (
    add,
    batchnorm2d,
    bilinear_resize,
    concat,
    matmul,
    permute,
    relu,
    repeat_batch,
    reshape,
    row_normalize,
    scale,
    tanh,
)
from .tensor import Tensor, default_dtype
from .views import VIEW_IDS, apply_view

ROW_EPS = 1e-8
GUARD_THRESHOLD = 1e-3


@dataclass
class PyramidFeatures:
    """Encoder output pyramid: strides 4, 8, 16 relative to the input."""

    low: Tensor  # (N, d4, h4, w4)
    mid: Tensor  # (N, d2, h2, w2)
    deep: Tensor  # (N, d, h, w)

    def validate(self) -> None:
        n, _, h4, w4 = self.low.shape
        n2, _, h2, w2 = self.mid.shape
        n3, _, h, w = self.deep.shape
        if not (n == n2 == n3):
            raise ValueError(
                f"pyramid batch sizes differ: {n}, {n2}, {n3}"
            )
        if (h4, w4) != (2 * h2, 2 * w2) or (h2, w2) != (2 * h, 2 * w):
            raise ValueError(
                f"pyramid spatial sizes must halve per level, got "
                f"{h4}x{w4}, {h2}x{w2}, {h}x{w}"
            )


@dataclass
class LatentPyramid:
    """Shared-width latents: query, context, and one key map per view."""

    query: Tensor  # (N, c, h4, w4)
    context: Tensor  # (N, c, h2, w2)
    keys: List[Tensor]  # each (N, c, *, *), spatial layout is the view's


@dataclass
class AttentionStats:
    """Row accounting for one or more attention builds."""

    rows: int = 0
    guarded: int = 0

    @property
    def guarded_fraction(self) -> float:
        return self.guarded / self.rows if self.rows else 0.0


@dataclass
class PyramidAttentionParams:
    query_proj: ConvBlock  # 1x1, stride-4 width -> latent
    context_proj: ConvBlock  # 1x1, stride-8 width -> latent
    key_proj: ConvBlock  # 1x1, stride-16 width -> latent
    view_weights: List[Tensor]  # scalar blend per view
    channel_bias: Tensor  # (latent, latent) additive channel map
    passing_weight: Tensor  # (deep width, fused) projection of attended features
    passing_bn: BatchNorm  # over fused width
    fuse: ConvBlock  # 3x3, (2 + views) * latent -> fused
    num_views: int
    latent: int
    fused: int

    def named_params(self, prefix: str = "paf"):
        yield from self.query_proj.named_params(f"{prefix}.query_proj")
        yield from self.context_proj.named_params(f"{prefix}.context_proj")
        yield from self.key_proj.named_params(f"{prefix}.key_proj")
        for i, w in enumerate(self.view_weights):
            yield f"{prefix}.view_weight{i}", "weight", w
        yield f"{prefix}.channel_bias", "weight", self.channel_bias
        yield f"{prefix}.passing_weight", "weight", self.passing_weight
        yield from self.passing_bn.named_params(f"{prefix}.passing_bn")
        yield from self.fuse.named_params(f"{prefix}.fuse")

    def named_buffers(self, prefix: str = "paf"):
        yield from self.query_proj.named_buffers(f"{prefix}.query_proj")
        yield from self.context_proj.named_buffers(f"{prefix}.context_proj")
        yield from self.key_proj.named_buffers(f"{prefix}.key_proj")
        yield from self.passing_bn.named_buffers(f"{prefix}.passing_bn")
        yield from self.fuse.named_buffers(f"{prefix}.fuse")


def make_paf_params(
    rng: np.random.Generator,
    widths: tuple,
    latent: int,
    fused: int,
    num_views: int = 3,
) -> PyramidAttentionParams:
    """Fresh parameters for one attention head.

    ``widths`` are the pyramid channel widths (stride-4, stride-8,
    stride-16). View weights start at 1 and the channel map starts as the
    identity, so the initial channel modulation is pure co-occurrence plus
    pass-through.
    """
    if not 1 <= num_views <= len(VIEW_IDS):
        raise ValueError(f"num_views must be in 1..{len(VIEW_IDS)}, got {num_views}")
    d4, d2, d = widths
    dt = default_dtype()
    return PyramidAttentionParams(
        query_proj=make_conv_block(rng, d4, latent, k=1),
        context_proj=make_conv_block(rng, d2, latent, k=1),
        key_proj=make_conv_block(rng, d, latent, k=1),
        view_weights=[
            Tensor(np.ones((), dtype=dt), requires_grad=True) for _ in range(num_views)
        ],
        channel_bias=Tensor(np.eye(latent, dtype=dt), requires_grad=True),
        passing_weight=Tensor(he_normal(rng, (d, fused), fan_in=d), requires_grad=True),
        passing_bn=make_batchnorm(fused),
        fuse=make_conv_block(rng, (2 + num_views) * latent, fused, k=3),
        num_views=num_views,
        latent=latent,
        fused=fused,
    )


def _flatten_pixels(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C), row-major over pixels."""
    n, c, h, w = x.shape
    return reshape(permute(x, (0, 2, 3, 1)), (n, h * w, c))


def encode_pyramid(
    feats: PyramidFeatures, params: PyramidAttentionParams, mode: str
) -> LatentPyramid:
    """Project the pyramid into latent space, keys once per view."""
    feats.validate()
    query = conv_bn_relu(feats.low, params.query_proj, mode)
    context = conv_bn_relu(feats.mid, params.context_proj, mode)
    keys = [
        conv_bn_relu(apply_view(feats.deep, vid), params.key_proj, mode)
        for vid in VIEW_IDS[: params.num_views]
    ]
    return LatentPyramid(query=query, context=context, keys=keys)


def build_attention(
    lat: LatentPyramid,
    params: PyramidAttentionParams,
    stats: Optional[AttentionStats] = None,
) -> Tensor:
    """Row-normalised attention from query pixels to deep pixels.

    Returns (N, query pixels, deep pixels). The channel map
    ``tanh(Z^T Z) + channel_bias`` is applied to the queries once and the
    result is matched against every view's keys; per-view scores are
    rectified, blended with the view weights, and each row is divided by its
    mass plus ``ROW_EPS``.
    """
    widths = {t.shape[1] for t in [lat.query, lat.context, *lat.keys]}
    if len(widths) != 1:
        raise ValueError(f"latent width mismatch across pyramid: {sorted(widths)}")
    if len(lat.keys) != params.num_views:
        raise ValueError(
            f"expected {params.num_views} key maps, got {len(lat.keys)}"
        )
    n = lat.query.shape[0]

    q = _flatten_pixels(lat.query)  # (N, P, c)
    z = _flatten_pixels(lat.context)  # (N, M, c)
    chan = add(
        tanh(matmul(permute(z, (0, 2, 1)), z)),  # (N, c, c)
        repeat_batch(params.channel_bias, n),
    )
    q_mod = matmul(q, chan)  # (N, P, c)

    blended = None
    for w, key in zip(params.view_weights, lat.keys):
        k = _flatten_pixels(key)  # (N, L, c)
        term = scale(relu(matmul(q_mod, permute(k, (0, 2, 1)))), w)
        blended = term if blended is None else add(blended, term)

    if stats is not None:
        mass = blended.data.sum(axis=-1)
        stats.rows += int(mass.size)
        stats.guarded += int((mass < GUARD_THRESHOLD).sum())
    return row_normalize(blended, eps=ROW_EPS)


def attention_pass(
    attn: Tensor, deep: Tensor, params: PyramidAttentionParams, mode: str
) -> Tensor:
    """Carry deep features through the attention up to query resolution.

    ``attn`` is (N, P, L) with L = deep pixel count and P = 16 L (the
    stride-4 grid over the same image). Deep features are projected to the
    fused width, attended, reshaped back to the fine grid, then
    batch-normalised and rectified.
    """
    if attn.ndim != 3:
        raise ValueError(f"attention must be (N, P, L), got shape {attn.shape}")
    n, d, h, w = deep.shape
    if attn.shape[0] != n:
        raise ValueError(f"batch mismatch: attention {attn.shape[0]}, features {n}")
    if attn.shape[2] != h * w:
        raise ValueError(
            f"attention columns ({attn.shape[2]}) != deep pixels ({h}x{w}={h * w})"
        )
    if attn.shape[1] != 16 * h * w:
        raise ValueError(
            f"attention rows ({attn.shape[1]}) != 16x deep pixels ({16 * h * w})"
        )
    if params.passing_weight.shape[0] != d:
        raise ValueError(
            f"passing weight expects width {params.passing_weight.shape[0]}, "
            f"deep features have {d}"
        )
    u = params.passing_weight.shape[1]
    h4, w4 = 4 * h, 4 * w

    flat = reshape(permute(deep, (0, 2, 3, 1)), (n * h * w, d))
    msg = reshape(matmul(flat, params.passing_weight), (n, h * w, u))
    carried = matmul(attn, msg)  # (N, P, u)
    grid = permute(reshape(carried, (n, h4, w4, u)), (0, 3, 1, 2))
    bn = params.passing_bn
    return relu(
        batchnorm2d(grid, bn.gamma, bn.beta, bn.running_mean, bn.running_var, mode)
    )


def fuse(
    lat: LatentPyramid,
    passed: Tensor,
    params: PyramidAttentionParams,
    mode: str,
) -> Tensor:
    """Merge upsampled latents convolutionally and add the attended features."""
    _, _, h4, w4 = lat.query.shape
    stacked = [lat.query]
    for t in [lat.context, *lat.keys]:
        stacked.append(bilinear_resize(t, h4, w4))
    merged = conv_bn_relu(concat(stacked, axis=1), params.fuse, mode)
    if merged.shape != passed.shape:
        raise ValueError(
            f"fused map {merged.shape} and attended map {passed.shape} disagree"
        )
    return add(merged, passed)


def paf_forward(
    feats: PyramidFeatures,
    params: PyramidAttentionParams,
    mode: str,
    stats: Optional[AttentionStats] = None,
) -> Tensor:
    """Full head: latents, attention, carry, merge. Returns (N, fused, h4, w4)."""
    lat = encode_pyramid(feats, params, mode)
    attn = build_attention(lat, params, stats=stats)
    passed = attention_pass(attn, feats.deep, params, mode)
    return fuse(lat, passed, params, mode)
