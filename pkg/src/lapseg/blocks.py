"""Building blocks of the segmentation network.

The decoder repeats one fixed pipeline per stage: transposed convolution
(exact 2x upsampling) -> skip concatenation -> two residual blocks ->
BN/ReLU -> atrous spatial pyramid pooling -> BN/ReLU -> squeeze-excitation.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import SkipShapeMismatch


class ResidualBlock(nn.Module):
    """Two conv3x3-BN-ReLU stages with an additive shortcut and a final ReLU.

    The shortcut is the identity when channel counts match and a 1x1
    projection otherwise. Spatial dims are preserved.
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        return F.relu(y + self.shortcut(x))


class ASPP(nn.Module):
    """Parallel dilated 3x3 convolutions fused by a 1x1 projection.

    One branch per dilation rate (rate 1 is a plain 3x3 convolution) plus an
    optional global-average-pool branch broadcast back to the input grid.
    Branch outputs are concatenated and projected to ``out_channels``.
    """

    def __init__(self, in_channels, out_channels, rates=(1, 6, 12), global_pool=True):
        super().__init__()
        if not rates:
            raise ValueError("ASPP needs at least one dilation rate")
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, out_channels, 3, padding=r, dilation=r) for r in rates)
        self.pool_conv = nn.Conv2d(in_channels, out_channels, 1) if global_pool else None
        n_branches = len(rates) + (1 if global_pool else 0)
        self.project = nn.Conv2d(n_branches * out_channels, out_channels, 1)

    def forward(self, x):
        outs = [branch(x) for branch in self.branches]
        if self.pool_conv is not None:
            pooled = self.pool_conv(x.mean(dim=(2, 3), keepdim=True))
            outs.append(pooled.expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(outs, dim=1))


class SqueezeExcite(nn.Module):
    """Channel gate: sigmoid(W2 relu(W1 gap(x))) scaling each channel."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def forward(self, x):
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean(dim=(2, 3))))))
        return x * gate[:, :, None, None]


class DecoderBlock(nn.Module):
    """One decoder stage; doubles spatial resolution.

    ``skip_channels`` of 0 builds the skip-free variant used by the last
    stages, where no encoder feature map exists at the target resolution.
    """

    def __init__(self, in_channels, skip_channels, out_channels,
                 aspp_rates=(1, 6, 12), se_reduction=16, aspp_global_pool=True):
        super().__init__()
        self.skip_channels = skip_channels
        # kernel 4 / stride 2 / padding 1 gives exact 2x output size
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1)
        self.res1 = ResidualBlock(out_channels + skip_channels, out_channels)
        self.res2 = ResidualBlock(out_channels, out_channels)
        self.bn_mid = nn.BatchNorm2d(out_channels)
        self.aspp = ASPP(out_channels, out_channels, aspp_rates, aspp_global_pool)
        self.bn_out = nn.BatchNorm2d(out_channels)
        self.se = SqueezeExcite(out_channels, se_reduction)

    def forward(self, x, skip=None):
        if skip is not None:
            expected = (2 * x.shape[2], 2 * x.shape[3])
            if tuple(skip.shape[2:]) != expected:
                raise SkipShapeMismatch(
                    f"skip {tuple(skip.shape[2:])} is not 2x input {tuple(x.shape[2:])}")
            if skip.shape[1] != self.skip_channels:
                raise SkipShapeMismatch(
                    f"skip has {skip.shape[1]} channels, block expects {self.skip_channels}")
        elif self.skip_channels:
            raise SkipShapeMismatch(f"block expects a {self.skip_channels}-channel skip")

        x = self.up(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        x = self.res2(self.res1(x))
        x = F.relu(self.bn_mid(x))
        x = self.aspp(x)
        x = F.relu(self.bn_out(x))
        return self.se(x)
