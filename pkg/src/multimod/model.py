"""The full segmentation network: per-modality encoders chained by fusion.

Each modality owns a small strided encoder producing a three-level pyramid
(strides 4, 8, 16) and an attention head that condenses the pyramid into a
stride-4 fused map. Modalities are processed in configuration order; from
the second one on, the previous modality's fused map is injected into the
encoder right after its stride-4 stage through the configured fusion unit.
The fused maps of all modalities are concatenated and decoded by a single
3x3 convolution, then resized bilinearly to the input resolution. Outputs
are raw logits.

Inputs must share batch size and spatial size, with height and width
divisible by 16 so the pyramid levels nest exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .attention import (
    AttentionStats,
    PyramidAttentionParams,
    PyramidFeatures,
    make_paf_params,
    paf_forward,
)
from .blocks import ConvBlock, conv_bn_relu, he_normal, make_conv_block
from .gating import FUSION_KINDS, FusionParams, apply_fusion, make_fusion_params
from .ops import bilinear_resize, concat, conv2d
from .tensor import Tensor, default_dtype


@dataclass
class ModalitySpec:
    name: str
    channels: int


@dataclass
class ModelConfig:
    modalities: List[ModalitySpec]
    num_classes: int
    widths: tuple = (16, 32, 64)  # pyramid channel widths at strides 4/8/16
    latent: int = 6
    fused: int = 24
    num_views: int = 3
    fusion: str = "gated"

    def validate(self) -> None:
        if not self.modalities:
            raise ValueError("model config: need at least one modality")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"model config: duplicate modality names in {names}")
        for m in self.modalities:
            if m.channels < 1:
                raise ValueError(f"model config: modality {m.name} has no channels")
        if len(self.widths) != 3:
            raise ValueError(f"model config: widths must be a triple, got {self.widths}")
        if self.num_classes < 2:
            raise ValueError(f"model config: need >= 2 classes, got {self.num_classes}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(
                f"model config: fusion {self.fusion!r} not one of {FUSION_KINDS}"
            )


@dataclass
class EncoderParams:
    stem: ConvBlock  # stride 2
    stage1: List[ConvBlock]  # stride 2 then 1; output is the stride-4 map
    stage2: List[ConvBlock]  # stride 2 then 1; stride-8
    stage3: List[ConvBlock]  # stride 2 then 1; stride-16

    def named_params(self, prefix: str):
        yield from self.stem.named_params(f"{prefix}.stem")
        for si, stage in enumerate((self.stage1, self.stage2, self.stage3), start=1):
            for bi, block in enumerate(stage):
                yield from block.named_params(f"{prefix}.stage{si}.block{bi}")

    def named_buffers(self, prefix: str):
        yield from self.stem.named_buffers(f"{prefix}.stem")
        for si, stage in enumerate((self.stage1, self.stage2, self.stage3), start=1):
            for bi, block in enumerate(stage):
                yield from block.named_buffers(f"{prefix}.stage{si}.block{bi}")


@dataclass
class ModelParams:
    encoders: List[EncoderParams]  # one per modality
    heads: List[PyramidAttentionParams]  # one per modality
    fusions: List[FusionParams]  # one per modality after the first
    decode_kernel: Tensor  # (num_classes, M * fused, 3, 3)
    decode_bias: Tensor  # (num_classes,)
    config: ModelConfig = field(repr=False, default=None)

    def named_params(self):
        for spec, enc in zip(self.config.modalities, self.encoders):
            yield from enc.named_params(f"{spec.name}.enc")
        for spec, head in zip(self.config.modalities, self.heads):
            yield from head.named_params(f"{spec.name}.paf")
        for spec, fusion in zip(self.config.modalities[1:], self.fusions):
            yield from fusion.named_params(f"{spec.name}.fusion")
        yield "decode.kernel", "weight", self.decode_kernel
        yield "decode.bias", "bias", self.decode_bias

    def named_buffers(self):
        for spec, enc in zip(self.config.modalities, self.encoders):
            yield from enc.named_buffers(f"{spec.name}.enc")
        for spec, head in zip(self.config.modalities, self.heads):
            yield from head.named_buffers(f"{spec.name}.paf")
        for spec, fusion in zip(self.config.modalities[1:], self.fusions):
            yield from fusion.named_buffers(f"{spec.name}.fusion")


def count_parameters(params: ModelParams) -> int:
    return sum(t.size for _, _, t in params.named_params())


def make_encoder_params(
    rng: np.random.Generator, in_channels: int, widths: tuple
) -> EncoderParams:
    d4, d2, d = widths
    return EncoderParams(
        stem=make_conv_block(rng, in_channels, d4, k=3, stride=2),
        stage1=[
            make_conv_block(rng, d4, d4, k=3, stride=2),
            make_conv_block(rng, d4, d4, k=3, stride=1),
        ],
        stage2=[
            make_conv_block(rng, d4, d2, k=3, stride=2),
            make_conv_block(rng, d2, d2, k=3, stride=1),
        ],
        stage3=[
            make_conv_block(rng, d2, d, k=3, stride=2),
            make_conv_block(rng, d, d, k=3, stride=1),
        ],
    )


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters for the whole network, a pure function of ``rng``."""
    cfg.validate()
    encoders = [make_encoder_params(rng, m.channels, cfg.widths) for m in cfg.modalities]
    heads = [
        make_paf_params(rng, cfg.widths, cfg.latent, cfg.fused, cfg.num_views)
        for _ in cfg.modalities
    ]
    fusions = [
        make_fusion_params(rng, incoming=cfg.fused, encoder=cfg.widths[0], kind=cfg.fusion)
        for _ in cfg.modalities[1:]
    ]
    m = len(cfg.modalities)
    decode_kernel = Tensor(
        he_normal(rng, (cfg.num_classes, m * cfg.fused, 3, 3), fan_in=m * cfg.fused * 9),
        requires_grad=True,
    )
    decode_bias = Tensor(
        np.zeros(cfg.num_classes, dtype=default_dtype()), requires_grad=True
    )
    return ModelParams(
        encoders=encoders,
        heads=heads,
        fusions=fusions,
        decode_kernel=decode_kernel,
        decode_bias=decode_bias,
        config=cfg,
    )


def encoder_stage1(x: Tensor, enc: EncoderParams, mode: str) -> Tensor:
    """Stem plus first stage: input image to the stride-4 feature map."""
    y = conv_bn_relu(x, enc.stem, mode)
    for block in enc.stage1:
        y = conv_bn_relu(y, block, mode)
    return y


def encoder_tail(low: Tensor, enc: EncoderParams, mode: str) -> PyramidFeatures:
    """Stages 2 and 3 on a stride-4 map; returns the full pyramid."""
    y = low
    for block in enc.stage2:
        y = conv_bn_relu(y, block, mode)
    mid = y
    for block in enc.stage3:
        y = conv_bn_relu(y, block, mode)
    return PyramidFeatures(low=low, mid=mid, deep=y)


def _check_inputs(inputs: Dict[str, Tensor], cfg: ModelConfig) -> tuple:
    expected = [m.name for m in cfg.modalities]
    if sorted(inputs.keys()) != sorted(expected):
        raise ValueError(
            f"model inputs {sorted(inputs.keys())} != configured modalities {sorted(expected)}"
        )
    ref = inputs[expected[0]]
    if ref.ndim != 4:
        raise ValueError(f"modality {expected[0]}: expected NCHW, got shape {ref.shape}")
    n, _, h, w = ref.shape
    if h % 16 or w % 16:
        raise ValueError(f"input size {h}x{w} must be divisible by 16")
    for spec in cfg.modalities:
        t = inputs[spec.name]
        if t.ndim != 4 or t.shape[1] != spec.channels:
            raise ValueError(
                f"modality {spec.name}: expected (N, {spec.channels}, H, W), "
                f"got shape {t.shape}"
            )
        if t.shape[0] != n or t.shape[2] != h or t.shape[3] != w:
            raise ValueError(
                f"modality {spec.name}: shape {t.shape} disagrees with "
                f"{expected[0]} {ref.shape}"
            )
    return n, h, w


def multimodal_forward(
    inputs: Dict[str, Tensor],
    params: ModelParams,
    mode: str,
    collect: Optional[dict] = None,
) -> Tensor:
    """Run the full network; returns raw logits (N, classes, H, W).

    ``collect``, when given, receives per-modality diagnostics: gate maps
    under ``"<name>.gate"`` and attention row accounting under
    ``"<name>.attention"``.
    """
    cfg = params.config
    _, h, w = _check_inputs(inputs, cfg)
    fused_maps: List[Tensor] = []
    previous_fused: Optional[Tensor] = None
    for mi, spec in enumerate(cfg.modalities):
        enc = params.encoders[mi]
        low = encoder_stage1(inputs[spec.name], enc, mode)
        if mi > 0:
            gate_collect = None if collect is None else {}
            low = apply_fusion(
                previous_fused, low, params.fusions[mi - 1], mode, gate_collect
            )
            if collect is not None and gate_collect:
                collect[f"{spec.name}.gate"] = gate_collect["gate"]
        pyramid = encoder_tail(low, enc, mode)
        stats = None
        if collect is not None:
            stats = AttentionStats()
            collect[f"{spec.name}.attention"] = stats
        fused = paf_forward(pyramid, params.heads[mi], mode, stats=stats)
        fused_maps.append(fused)
        previous_fused = fused
    stacked = fused_maps[0] if len(fused_maps) == 1 else concat(fused_maps, axis=1)
    logits = conv2d(stacked, params.decode_kernel, bias=params.decode_bias, pad=1)
    return bilinear_resize(logits, h, w)
