"""Injection of one modality's fused features into the next encoder.

The gated unit computes a per-pixel, per-channel gate from the incoming
fused features and blends two sources convexly:

    gate    = sigmoid(BN(conv1x1(incoming)))
    recoded = BN(conv1x1(pre-sigmoid gate))
    out     = gate * encoder_features + (1 - gate) * recoded

so every output element lies between the two candidates; with the gate
saturated at 1 the encoder features pass through untouched. The incoming
map is bilinearly resized first when its spatial size disagrees. No
activation appears anywhere except the explicit sigmoid.

``concat`` and ``sum`` variants exist for ablations: both reduce the
incoming features with a 1x1 conv + BN and then either convolve the
concatenation back to the encoder width or add the two maps. All three
share the :func:`apply_fusion` entry point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .blocks import ConvBlock, conv_bn, make_conv_block
from .ops import add, bilinear_resize, concat, mul, one_minus, sigmoid
from .tensor import Tensor

FUSION_KINDS = ("gated", "concat", "sum")


@dataclass
class GatedFusionParams:
    gate_proj: ConvBlock  # 1x1, incoming width -> encoder width (pre-sigmoid)
    recode_proj: ConvBlock  # 1x1, encoder width -> encoder width
    kind: str = "gated"

    def named_params(self, prefix: str = "gfu"):
        yield from self.gate_proj.named_params(f"{prefix}.gate_proj")
        yield from self.recode_proj.named_params(f"{prefix}.recode_proj")

    def named_buffers(self, prefix: str = "gfu"):
        yield from self.gate_proj.named_buffers(f"{prefix}.gate_proj")
        yield from self.recode_proj.named_buffers(f"{prefix}.recode_proj")


@dataclass
class ConcatFusionParams:
    reduce_proj: ConvBlock  # 1x1, incoming width -> encoder width
    merge_proj: ConvBlock  # 1x1, 2x encoder width -> encoder width
    kind: str = "concat"

    def named_params(self, prefix: str = "gfu"):
        yield from self.reduce_proj.named_params(f"{prefix}.reduce_proj")
        yield from self.merge_proj.named_params(f"{prefix}.merge_proj")

    def named_buffers(self, prefix: str = "gfu"):
        yield from self.reduce_proj.named_buffers(f"{prefix}.reduce_proj")
        yield from self.merge_proj.named_buffers(f"{prefix}.merge_proj")


@dataclass
class SumFusionParams:
    reduce_proj: ConvBlock  # 1x1, incoming width -> encoder width
    kind: str = "sum"

    def named_params(self, prefix: str = "gfu"):
        yield from self.reduce_proj.named_params(f"{prefix}.reduce_proj")

    def named_buffers(self, prefix: str = "gfu"):
        yield from self.reduce_proj.named_buffers(f"{prefix}.reduce_proj")


FusionParams = Union[GatedFusionParams, ConcatFusionParams, SumFusionParams]


def make_fusion_params(
    rng: np.random.Generator, incoming: int, encoder: int, kind: str = "gated"
) -> FusionParams:
    """Parameters for injecting ``incoming``-wide features into an
    ``encoder``-wide stage, using the requested fusion rule."""
    if kind == "gated":
        return GatedFusionParams(
            gate_proj=make_conv_block(rng, incoming, encoder, k=1),
            recode_proj=make_conv_block(rng, encoder, encoder, k=1),
        )
    if kind == "concat":
        return ConcatFusionParams(
            reduce_proj=make_conv_block(rng, incoming, encoder, k=1),
            merge_proj=make_conv_block(rng, 2 * encoder, encoder, k=1),
        )
    if kind == "sum":
        return SumFusionParams(reduce_proj=make_conv_block(rng, incoming, encoder, k=1))
    raise ValueError(f"unknown fusion kind {kind!r} (valid: {FUSION_KINDS})")


def _match_spatial(incoming: Tensor, target: Tensor) -> Tensor:
    _, _, h, w = target.shape
    if incoming.shape[2] == h and incoming.shape[3] == w:
        return incoming
    return bilinear_resize(incoming, h, w)


def gated_fusion(
    incoming: Tensor,
    encoder_feat: Tensor,
    params: GatedFusionParams,
    mode: str,
    collect: Optional[dict] = None,
) -> Tensor:
    """Convex per-element blend of encoder features with recoded fused ones.

    When ``collect`` is given, the gate values (numpy, post-sigmoid) are
    stored under key ``"gate"`` for diagnostics such as gate heatmaps.
    """
    if incoming.ndim != 4 or encoder_feat.ndim != 4:
        raise ValueError(
            f"gated_fusion: expected NCHW tensors, got {incoming.shape} and "
            f"{encoder_feat.shape}"
        )
    if params.gate_proj.kernel.shape[1] != incoming.shape[1]:
        raise ValueError(
            f"gated_fusion: incoming has {incoming.shape[1]} channels, gate "
            f"projection expects {params.gate_proj.kernel.shape[1]}"
        )
    if params.gate_proj.kernel.shape[0] != encoder_feat.shape[1]:
        raise ValueError(
            f"gated_fusion: encoder features have {encoder_feat.shape[1]} channels, "
            f"gate projection emits {params.gate_proj.kernel.shape[0]}"
        )
    incoming = _match_spatial(incoming, encoder_feat)
    pre_gate = conv_bn(incoming, params.gate_proj, mode)
    gate = sigmoid(pre_gate)
    recoded = conv_bn(pre_gate, params.recode_proj, mode)
    if collect is not None:
        collect["gate"] = gate.data.copy()
    return add(mul(gate, encoder_feat), mul(one_minus(gate), recoded))


def apply_fusion(
    incoming: Tensor,
    encoder_feat: Tensor,
    params: FusionParams,
    mode: str,
    collect: Optional[dict] = None,
) -> Tensor:
    """Dispatch to the configured fusion rule (``gated``/``concat``/``sum``)."""
    if isinstance(params, GatedFusionParams):
        return gated_fusion(incoming, encoder_feat, params, mode, collect)

    incoming = _match_spatial(incoming, encoder_feat)
    reduced = conv_bn(incoming, params.reduce_proj, mode)
    if reduced.shape != encoder_feat.shape:
        raise ValueError(
            f"fusion: reduced incoming {reduced.shape} does not match encoder "
            f"features {encoder_feat.shape}"
        )
    if isinstance(params, ConcatFusionParams):
        return conv_bn(concat([encoder_feat, reduced], axis=1), params.merge_proj, mode)
    if isinstance(params, SumFusionParams):
        return add(encoder_feat, reduced)
    raise TypeError(f"unknown fusion params type {type(params).__name__}")
