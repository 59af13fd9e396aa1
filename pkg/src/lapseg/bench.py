"""Inference throughput (FPS) benchmark."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import torch


@dataclass
class BenchProtocol:
    batch_size: int = 1
    warmup_iters: int = 10
    timed_iters: int = 100
    input_size: tuple = (512, 256)  # (width, height)
    statistic: str = "median"

    def __post_init__(self):
        if self.timed_iters < 10:
            raise ValueError(f"timed_iters must be >= 10: {self.timed_iters}")
        if self.statistic not in ("median", "mean"):
            raise ValueError(f"statistic must be median or mean: {self.statistic!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1: {self.batch_size}")


@dataclass
class BenchResult:
    fps: float
    median_latency_s: float
    mean_latency_s: float
    std_latency_s: float
    times_s: list = field(default_factory=list)


def _sync(device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def fps_benchmark(model, protocol=BenchProtocol(), device=None):
    """Time repeated forwards on a fixed random batch and report FPS.

    Runs ``warmup_iters`` untimed iterations, then ``timed_iters`` timed ones
    with device synchronization around each timestamp. FPS is
    ``batch_size / statistic(per-iteration wall time)``; the median statistic
    resists scheduler outliers. Should run exclusively on its device, since a
    concurrent benchmark would skew both.
    """
    if device is None:
        device = next(model.parameters()).device
    device = torch.device(device)
    model = model.to(device).eval()

    width, height = protocol.input_size
    gen = torch.Generator().manual_seed(0)
    batch = torch.rand((protocol.batch_size, 3, height, width), generator=gen).to(device)

    times = []
    with torch.no_grad():
        for _ in range(protocol.warmup_iters):
            model(batch)
        _sync(device)
        for _ in range(protocol.timed_iters):
            start = time.perf_counter()
            model(batch)
            _sync(device)
            times.append(time.perf_counter() - start)

    central = statistics.median(times) if protocol.statistic == "median" else statistics.fmean(times)
    return BenchResult(
        fps=protocol.batch_size / central,
        median_latency_s=statistics.median(times),
        mean_latency_s=statistics.fmean(times),
        std_latency_s=statistics.pstdev(times),
        times_s=times,
    )
