"""Deterministic training loop with validation-driven checkpointing.

Per-epoch data order comes from a generator keyed by (seed, epoch) and
augmentation randomness from (seed, sample_index, epoch), so runs are
reproducible across restarts, resumes, and loader parallelism. Validation
and test passes never touch the augmentation path.
"""

from __future__ import annotations

import json
import logging
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import load_checkpoint, model_config_hash, save_checkpoint
from .errors import EmptyList, NonFiniteLoss
from .losses import DiceLossConfig, dice_loss
from .metrics import aggregate_metrics, confusion, metrics_from_counts
from .transforms import augment, load_sample

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 12
    optimizer: str = "sgd"  # or "adam"
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 100
    seed: int = 0
    lr_schedule: str = "constant"  # or "reduce_on_plateau"
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1: {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0: {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1: {self.epochs}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam: {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "reduce_on_plateau"):
            raise ValueError(f"unknown lr_schedule: {self.lr_schedule!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    val_miou: float
    learning_rate: float
    wall_time_seconds: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    def append(self, record, path=None):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch numbers must be strictly increasing")
        self.records.append(record)
        if path is not None:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record)) + "\n")


@dataclass
class CheckpointRecord:
    path: str
    epoch: int
    val_dice: float
    model_config_hash: str


def seed_everything(seed):
    """Seed every random source feeding training."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def epoch_rng(seed, epoch):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(epoch,))))


def load_batch(manifest, indices, target_size, aug_config=None, epoch=0, num_workers=0):
    """Assemble one batch as (B,3,H,W) images and (B,1,H,W) float masks.

    Augmentation, when configured, derives its randomness per sample index,
    so the result is identical whatever ``num_workers`` is.
    """
    def fetch(i):
        image, mask = load_sample(manifest.records[i], target_size)
        if aug_config is not None:
            image, mask = augment(image, mask, aug_config, sample_index=i, epoch=epoch)
        return image, mask

    if num_workers > 1:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            pairs = list(pool.map(fetch, indices))
    else:
        pairs = [fetch(i) for i in indices]

    images = torch.from_numpy(np.stack([p[0] for p in pairs])).permute(0, 3, 1, 2)
    masks = torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.float32)).unsqueeze(1)
    return images.contiguous(), masks


def make_optimizer(model, config):
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate,
                                weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.learning_rate,
                           momentum=config.momentum, weight_decay=config.weight_decay)


def validate(model, manifest, batch_size=8, device=None, threshold=0.5):
    """Un-augmented inference over a manifest; per-frame metrics, then mean."""
    if len(manifest) == 0:
        raise EmptyList("validation manifest is empty")
    if device is None:
        device = next(model.parameters()).device
    device = torch.device(device)
    model = model.to(device)
    was_training = model.training
    model.eval()
    target_size = model.config.input_size

    reports = []
    with torch.no_grad():
        for start in range(0, len(manifest), batch_size):
            indices = range(start, min(start + batch_size, len(manifest)))
            images, masks = load_batch(manifest, indices, target_size)
            probs = model(images.to(device)).cpu().numpy()
            masks = masks.numpy()
            for i in range(probs.shape[0]):
                counts = confusion(probs[i, 0], masks[i, 0], threshold=threshold)
                reports.append(metrics_from_counts(counts))
    if was_training:
        model.train()
    return aggregate_metrics(reports)


def train(model, train_manifest, val_manifest, train_config, aug_config=None,
          run_dir=None, loss_config=DiceLossConfig(), resume_from=None, num_workers=0):
    """Run the optimization loop; returns (model, TrainingLog, best checkpoint).

    Each epoch shuffles the training manifest with a seed derived from
    (config.seed, epoch), steps the optimizer per mini-batch of dice loss,
    validates on the un-augmented val set, appends one log record, and
    checkpoints whenever validation dice improves. ``resume_from`` restores
    model and optimizer state from a checkpoint and continues at the next
    epoch; because all randomness is epoch-keyed, a resumed run matches an
    uninterrupted one.
    """
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise EmptyList("train and val manifests must be non-empty")
    device = torch.device(train_config.device)
    model = model.to(device)
    optimizer = make_optimizer(model, train_config)
    scheduler = None
    if train_config.lr_schedule == "reduce_on_plateau":
        scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, mode="max", factor=0.5, patience=5)

    start_epoch = 0
    best_dice = float("-inf")
    best_record = None
    if resume_from is not None:
        resumed, payload, _sidecar = load_checkpoint(resume_from, map_location=device)
        model.load_state_dict(resumed.state_dict())
        if "optimizer_state" in payload:
            optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = (payload["epoch"] or 0) + 1
        if payload["best_val_dice"] is not None:
            best_dice = payload["best_val_dice"]
        logger.info("resumed from %s at epoch %d", resume_from, start_epoch)

    log_path = checkpoint_dir = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        checkpoint_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(checkpoint_dir, exist_ok=True)
        log_path = os.path.join(run_dir, "train_log.jsonl")

    config_hash = model_config_hash(model.config)
    target_size = model.config.input_size
    log = TrainingLog()
    n = len(train_manifest)

    for epoch in range(start_epoch, train_config.epochs):
        epoch_start = time.perf_counter()
        model.train()
        order = epoch_rng(train_config.seed, epoch).permutation(n)
        epoch_losses = []
        for batch_index, start in enumerate(range(0, n, train_config.batch_size)):
            indices = order[start:start + train_config.batch_size]
            images, masks = load_batch(train_manifest, indices, target_size,
                                       aug_config=aug_config, epoch=epoch,
                                       num_workers=num_workers)
            optimizer.zero_grad()
            loss = dice_loss(model(images.to(device)), masks.to(device), loss_config)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise NonFiniteLoss(
                    f"non-finite loss {value} at epoch {epoch} batch {batch_index}",
                    epoch=epoch, batch_index=batch_index)
            loss.backward()
            optimizer.step()
            epoch_losses.append(value)
            log.step_losses.append(value)

        report = validate(model, val_manifest, device=device)
        if scheduler is not None:
            scheduler.step(report.dice)

        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            val_dice=report.dice,
            val_miou=report.miou,
            learning_rate=optimizer.param_groups[0]["lr"],
            wall_time_seconds=time.perf_counter() - epoch_start,
        )
        log.append(record, path=log_path)
        logger.info("epoch %d: train_loss=%.4f val_dice=%.4f val_miou=%.4f",
                    epoch, record.train_loss, report.dice, report.miou)

        improved = report.dice > best_dice
        if improved:
            best_dice = report.dice
        if checkpoint_dir is not None:
            epoch_path = os.path.join(checkpoint_dir, f"epoch_{epoch}.ckpt")
            save_checkpoint(model, epoch_path, optimizer=optimizer, epoch=epoch,
                            best_val_dice=best_dice)
            if improved:
                best_path = os.path.join(checkpoint_dir, "best.ckpt")
                save_checkpoint(model, best_path, optimizer=optimizer, epoch=epoch,
                                best_val_dice=best_dice)
                best_record = CheckpointRecord(path=best_path, epoch=epoch,
                                               val_dice=report.dice,
                                               model_config_hash=config_hash)
        elif improved:
            best_record = CheckpointRecord(path="", epoch=epoch, val_dice=report.dice,
                                           model_config_hash=config_hash)

    return model, log, best_record
