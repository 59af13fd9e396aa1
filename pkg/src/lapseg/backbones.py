"""Pluggable encoder backbones emitting feature pyramids at strides 4-32.

Three extractors sit behind the same interface: a mobile-class ImageNet
network (``backbone_a``), a ResNet50 (``backbone_b``), and a small
from-scratch residual stack (``tiny_reference``) that keeps the full test
suite runnable without downloaded weights.
"""

from __future__ import annotations

import torch
from torch import nn

from .blocks import ResidualBlock
from .errors import IncompatibleStrides, WeightsUnavailable

PYRAMID_STRIDES = (4, 8, 16, 32)


class TinyBackbone(nn.Module):
    """Four-stage strided residual stack trained from scratch."""

    base_channels = (16, 32, 64, 128)

    def __init__(self, width_multiplier=1.0):
        super().__init__()
        c = [max(2, round(b * width_multiplier)) for b in self.base_channels]
        self.channels = {4: c[0], 8: c[1], 16: c[2], 32: c[3]}

        def down(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                ResidualBlock(cout, cout),
            )

        self.stem = nn.Sequential(
            nn.Conv2d(3, c[0], 3, stride=2, padding=1),
            nn.BatchNorm2d(c[0]),
            nn.ReLU(inplace=True),
        )
        self.stage1 = down(c[0], c[0])
        self.stage2 = down(c[0], c[1])
        self.stage3 = down(c[1], c[2])
        self.stage4 = down(c[2], c[3])

    def forward(self, x):
        x = self.stage1(self.stem(x))
        levels = {4: x}
        x = self.stage2(x)
        levels[8] = x
        x = self.stage3(x)
        levels[16] = x
        levels[32] = self.stage4(x)
        return levels


class MobileBackbone(nn.Module):
    """MobileNetV2 feature pyramid (strides 4/8/16/32, channels 24/32/96/320)."""

    channels = {4: 24, 8: 32, 16: 96, 32: 320}
    _capture = {3: 4, 6: 8, 13: 16, 17: 32}

    def __init__(self, pretrained=False):
        super().__init__()
        from torchvision.models import mobilenet_v2
        weights = _imagenet_weights("MobileNet_V2_Weights") if pretrained else None
        net = _construct(mobilenet_v2, weights)
        # features[18] is the final 1x1 expansion to 1280; dropping it keeps
        # the bottleneck lean without losing a pyramid level
        self.features = net.features[:18]

    def forward(self, x):
        levels = {}
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self._capture:
                levels[self._capture[i]] = x
        return levels


class ResNet50Backbone(nn.Module):
    """ResNet50 feature pyramid (strides 4/8/16/32, channels 256/512/1024/2048)."""

    channels = {4: 256, 8: 512, 16: 1024, 32: 2048}

    def __init__(self, pretrained=False):
        super().__init__()
        from torchvision.models import resnet50
        weights = _imagenet_weights("ResNet50_Weights") if pretrained else None
        net = _construct(resnet50, weights)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, x):
        x = self.layer1(self.stem(x))
        levels = {4: x}
        x = self.layer2(x)
        levels[8] = x
        x = self.layer3(x)
        levels[16] = x
        levels[32] = self.layer4(x)
        return levels


def _imagenet_weights(enum_name):
    import torchvision.models as tvm
    return getattr(tvm, enum_name).DEFAULT


def _construct(factory, weights):
    try:
        return factory(weights=weights)
    except Exception as exc:  # download failure, checksum, offline host
        raise WeightsUnavailable(f"cannot obtain pretrained weights: {exc}") from exc


BACKBONES = {
    "backbone_a": MobileBackbone,
    "backbone_b": ResNet50Backbone,
    "tiny_reference": TinyBackbone,
}


def make_backbone(spec, width_multiplier=1.0):
    """Instantiate the extractor described by an EncoderSpec."""
    if spec.backbone_id not in BACKBONES:
        raise ValueError(f"unknown backbone: {spec.backbone_id!r}")
    strides = set(spec.output_strides)
    if 32 not in strides or not strides.issubset(PYRAMID_STRIDES):
        raise IncompatibleStrides(
            f"output_strides must be a subset of {PYRAMID_STRIDES} containing 32: "
            f"{sorted(strides)}")

    if spec.backbone_id == "tiny_reference":
        if spec.pretrained:
            raise WeightsUnavailable("tiny_reference has no pretrained weights")
        net = TinyBackbone(width_multiplier)
    else:
        net = BACKBONES[spec.backbone_id](pretrained=spec.pretrained)
    if spec.frozen:
        for p in net.parameters():
            p.requires_grad_(False)
    return net
