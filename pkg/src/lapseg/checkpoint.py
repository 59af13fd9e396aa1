"""Checkpoint save/load: torch weight file plus a JSON sidecar.

The sidecar carries everything needed to rebuild the network without the
weight file: the full model config, creation time, package version, the
trainable parameter count, and the training state (epoch, best validation
dice). It lives next to the weight file with a ``.json`` suffix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from datetime import datetime, timezone

import torch

from . import __version__
from .model import DecoderBlockSpec, EncoderSpec, ModelConfig, SegmentationModel, count_parameters


def sidecar_path(checkpoint_path):
    base, _ext = os.path.splitext(str(checkpoint_path))
    return base + ".json"


def config_to_dict(config):
    return dataclasses.asdict(config)


def config_from_dict(payload):
    def encoder(d):
        return EncoderSpec(
            backbone_id=d["backbone_id"],
            pretrained=bool(d["pretrained"]),
            output_strides=tuple(d["output_strides"]),
            frozen=bool(d["frozen"]),
        )

    blocks = tuple(
        DecoderBlockSpec(
            out_channels=b["out_channels"],
            aspp_dilation_rates=tuple(b["aspp_dilation_rates"]),
            se_reduction=b["se_reduction"],
            num_residual_blocks=b["num_residual_blocks"],
            aspp_global_pool=bool(b["aspp_global_pool"]),
        )
        for b in payload["decoder_blocks"])
    return ModelConfig(
        encoder_a=encoder(payload["encoder_a"]),
        encoder_b=encoder(payload["encoder_b"]),
        decoder_blocks=blocks,
        input_size=tuple(payload["input_size"]),
        width_multiplier=payload["width_multiplier"],
    )


def model_config_hash(config):
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def save_checkpoint(model, path, optimizer=None, epoch=None, best_val_dice=None):
    """Write the weight file and its sidecar; returns the sidecar dict."""
    payload = {"model_state": model.state_dict(), "epoch": epoch,
               "best_val_dice": best_val_dice}
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    torch.save(payload, path)

    sidecar = {
        "model_config": config_to_dict(model.config),
        "created_at": datetime.now(timezone.utc).isoformat(),
        "git_or_version": f"lapseg {__version__}",
        "trainable_parameter_count": count_parameters(model),
        "training_state": {"epoch": epoch, "best_val_dice": best_val_dice},
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    return sidecar


def load_checkpoint(path, map_location="cpu"):
    """Rebuild the model from the sidecar and load its weights.

    Returns ``(model, payload, sidecar)`` where payload holds the raw saved
    dict (including optimizer state when present).
    """
    with open(sidecar_path(path), encoding="utf-8") as fh:
        sidecar = json.load(fh)
    config = config_from_dict(sidecar["model_config"])
    model = SegmentationModel(config)
    payload = torch.load(path, map_location=map_location, weights_only=True)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload, sidecar
