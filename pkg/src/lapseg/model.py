"""Segmentation network: dual-backbone encoder cascade plus staged decoder.

Both backbones run on the same input; their pyramids are fused per stride by
channel concatenation and feed a decoder of five doubling stages
(32 -> 16 -> 8 -> 4 -> 2 -> 1). Stages whose target stride has an encoder
level (16, 8, 4) concatenate the fused skip; the last two run skip-free. A
1x1 convolution with sigmoid produces the per-pixel instrument probability.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import PYRAMID_STRIDES, make_backbone
from .blocks import DecoderBlock
from .errors import NonFiniteActivation, ShapeError, StrideSetMismatch

BOTTLENECK_STRIDE = 32
DEFAULT_DECODER_CHANNELS = (256, 128, 64, 32, 16)
# wider dilations where the feature grid is fine (output stride <= 8)
DEFAULT_ASPP_RATES = ((1, 2, 4), (1, 6, 12), (1, 6, 12), (1, 6, 12), (1, 6, 12))


@dataclass(frozen=True)
class EncoderSpec:
    backbone_id: str
    pretrained: bool = False
    output_strides: tuple = PYRAMID_STRIDES
    frozen: bool = False


@dataclass(frozen=True)
class DecoderBlockSpec:
    out_channels: int
    aspp_dilation_rates: tuple = (1, 6, 12)
    se_reduction: int = 16
    num_residual_blocks: int = 2
    aspp_global_pool: bool = True

    def __post_init__(self):
        rates = tuple(self.aspp_dilation_rates)
        if not rates or any(r < 1 for r in rates):
            raise ValueError(f"dilation rates must be positive: {rates}")
        if len(set(rates)) != len(rates) or list(rates) != sorted(rates):
            raise ValueError(f"dilation rates must be distinct and sorted: {rates}")
        if self.num_residual_blocks != 2:
            raise ValueError("the decoder pipeline is fixed at 2 residual blocks")


@dataclass(frozen=True)
class ModelConfig:
    encoder_a: EncoderSpec
    encoder_b: EncoderSpec
    decoder_blocks: tuple
    input_size: tuple = (512, 256)  # (width, height)
    width_multiplier: float = 1.0

    def validate(self):
        width, height = self.input_size
        if width <= 0 or width % 32:
            raise ShapeError(f"input width must be a positive multiple of 32: {width}")
        if height <= 0 or height % 32:
            raise ShapeError(f"input height must be a positive multiple of 32: {height}")
        if not 0 < self.width_multiplier <= 1:
            raise ValueError(f"width_multiplier must be in (0, 1]: {self.width_multiplier}")
        n_stages = int(math.log2(BOTTLENECK_STRIDE))
        if len(self.decoder_blocks) != n_stages:
            raise ValueError(
                f"need {n_stages} decoder blocks to reach full resolution from "
                f"stride {BOTTLENECK_STRIDE}, got {len(self.decoder_blocks)}")
        for enc in (self.encoder_a, self.encoder_b):
            if BOTTLENECK_STRIDE not in enc.output_strides:
                raise ValueError(f"encoder {enc.backbone_id} must emit stride 32")
        if set(self.encoder_a.output_strides) != set(self.encoder_b.output_strides):
            raise StrideSetMismatch(
                f"encoders disagree on strides: {self.encoder_a.output_strides} "
                f"vs {self.encoder_b.output_strides}")


def full_config(pretrained=True, input_size=(512, 256), width_multiplier=1.0):
    """The full-size dual-backbone configuration."""
    blocks = tuple(
        DecoderBlockSpec(out_channels=c, aspp_dilation_rates=r)
        for c, r in zip(DEFAULT_DECODER_CHANNELS, DEFAULT_ASPP_RATES))
    return ModelConfig(
        encoder_a=EncoderSpec("backbone_a", pretrained=pretrained),
        encoder_b=EncoderSpec("backbone_b", pretrained=pretrained),
        decoder_blocks=blocks,
        input_size=input_size,
        width_multiplier=width_multiplier,
    )


def tiny_config(width_multiplier=0.25, input_size=(64, 64), se_reduction=4):
    """A desk-scale configuration with two from-scratch tiny backbones."""
    blocks = tuple(
        DecoderBlockSpec(out_channels=c, aspp_dilation_rates=r, se_reduction=se_reduction)
        for c, r in zip(DEFAULT_DECODER_CHANNELS, DEFAULT_ASPP_RATES))
    return ModelConfig(
        encoder_a=EncoderSpec("tiny_reference"),
        encoder_b=EncoderSpec("tiny_reference"),
        decoder_blocks=blocks,
        input_size=input_size,
        width_multiplier=width_multiplier,
    )


def fuse_skips(pyr_a, pyr_b):
    """Concatenate two pyramids channel-wise per stride.

    If a level's spatial dims disagree (odd-size rounding between backbones),
    the second pyramid's map is bilinearly resampled onto the first's grid.
    """
    if set(pyr_a) != set(pyr_b):
        raise StrideSetMismatch(f"stride sets differ: {sorted(pyr_a)} vs {sorted(pyr_b)}")
    fused = {}
    for stride in sorted(pyr_a):
        a, b = pyr_a[stride], pyr_b[stride]
        if a.shape[2:] != b.shape[2:]:
            b = F.interpolate(b, size=a.shape[2:], mode="bilinear", align_corners=False)
        fused[stride] = torch.cat([a, b], dim=1)
    return fused


def _effective_channels(raw, width_multiplier, se_reduction):
    """Scale a width and round up so the SE reduction divides it."""
    scaled = max(1, round(raw * width_multiplier))
    return math.ceil(scaled / se_reduction) * se_reduction


class SegmentationModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder_a = make_backbone(config.encoder_a, config.width_multiplier)
        self.encoder_b = make_backbone(config.encoder_b, config.width_multiplier)
        self.strides = tuple(sorted(config.encoder_a.output_strides))

        fused_channels = {
            s: self.encoder_a.channels[s] + self.encoder_b.channels[s]
            for s in self.strides}

        blocks = []
        skip_channel_map = {}
        in_channels = fused_channels[BOTTLENECK_STRIDE]
        stride = BOTTLENECK_STRIDE
        for spec in config.decoder_blocks:
            stride //= 2
            skip_ch = fused_channels.get(stride, 0) if stride >= 4 else 0
            out_ch = _effective_channels(spec.out_channels, config.width_multiplier,
                                         spec.se_reduction)
            blocks.append(DecoderBlock(
                in_channels, skip_ch, out_ch,
                aspp_rates=tuple(spec.aspp_dilation_rates),
                se_reduction=spec.se_reduction,
                aspp_global_pool=spec.aspp_global_pool,
            ))
            skip_channel_map[stride] = skip_ch
            in_channels = out_ch
        self.decoder = nn.ModuleList(blocks)
        self.skip_strides = skip_channel_map
        self.head = nn.Conv2d(in_channels, 1, 1)

    @property
    def trainable_parameter_count(self):
        return count_parameters(self)

    def encode(self, batch):
        """Run both backbones; returns the two stride-keyed pyramids."""
        self._check_input(batch)
        keep = set(self.strides)
        pyr_a = {s: f for s, f in self.encoder_a(batch).items() if s in keep}
        pyr_b = {s: f for s, f in self.encoder_b(batch).items() if s in keep}
        return pyr_a, pyr_b

    def forward(self, batch):
        """Probability map of shape B x 1 x H x W, all values in (0, 1)."""
        pyr_a, pyr_b = self.encode(batch)
        fused = fuse_skips(pyr_a, pyr_b)
        x = fused[BOTTLENECK_STRIDE]
        stride = BOTTLENECK_STRIDE
        for block in self.decoder:
            stride //= 2
            skip = fused.get(stride) if self.skip_strides.get(stride) else None
            x = block(x, skip)
        logits = self.head(x)
        if not torch.isfinite(logits).all():
            raise NonFiniteActivation("forward produced NaN or Inf logits")
        return torch.sigmoid(logits)

    @staticmethod
    def _check_input(batch):
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ShapeError(f"expected B x 3 x H x W input, got {tuple(batch.shape)}")
        if batch.shape[2] % 32 or batch.shape[3] % 32:
            raise ShapeError(f"H and W must be divisible by 32: {tuple(batch.shape[2:])}")


def build_model(config):
    """Construct the network described by ``config`` and log its size."""
    model = SegmentationModel(config)
    import logging
    logging.getLogger(__name__).info(
        "built model: %d trainable parameters", model.trainable_parameter_count)
    return model


def count_parameters(model):
    """Total element count of trainable weight tensors."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
