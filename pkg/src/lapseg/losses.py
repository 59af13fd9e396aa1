"""Soft dice loss used for training."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NonBinaryTarget, ShapeMismatch


@dataclass
class DiceLossConfig:
    smooth: float = 1.0
    aggregation: str = "per_sample_mean"  # or "global"

    def __post_init__(self):
        if self.smooth <= 0:
            raise ValueError(f"smooth must be > 0: {self.smooth}")
        if self.aggregation not in ("per_sample_mean", "global"):
            raise ValueError(f"unknown aggregation: {self.aggregation!r}")


def dice_loss(probs, target, config=DiceLossConfig()):
    """1 minus the smoothed soft dice coefficient.

    Per sample ``d_i = (2*sum(p*g) + s) / (sum(p) + sum(g) + s)``; the loss is
    ``1 - mean_i(d_i)`` under ``per_sample_mean`` aggregation, or the same
    expression over all pixels at once under ``global``. Differentiable in
    ``probs`` everywhere and confined to [0, 1).
    """
    if probs.shape != target.shape:
        raise ShapeMismatch(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise NonBinaryTarget("target mask must contain only 0 and 1")

    target = target.to(probs.dtype)
    s = config.smooth
    if config.aggregation == "per_sample_mean":
        p = probs.reshape(probs.shape[0], -1)
        g = target.reshape(target.shape[0], -1)
        dice = (2.0 * (p * g).sum(dim=1) + s) / (p.sum(dim=1) + g.sum(dim=1) + s)
        return 1.0 - dice.mean()
    dice = (2.0 * (probs * target).sum() + s) / (probs.sum() + target.sum() + s)
    return 1.0 - dice
