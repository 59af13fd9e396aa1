import math

import pytest
import torch

from lapseg.bench import BenchProtocol, BenchResult, fps_benchmark
from lapseg.model import build_model, tiny_config


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return build_model(tiny_config(width_multiplier=0.125, input_size=(64, 64))).eval()


def quick_protocol(**kwargs):
    defaults = dict(batch_size=1, warmup_iters=2, timed_iters=10,
                    input_size=(64, 64), statistic="median")
    defaults.update(kwargs)
    return BenchProtocol(**defaults)


class TestProtocol:
    def test_too_few_timed_iters_rejected(self):
        with pytest.raises(ValueError, match="timed_iters"):
            BenchProtocol(timed_iters=5)

    def test_bad_statistic(self):
        with pytest.raises(ValueError):
            BenchProtocol(statistic="p99")

    def test_defaults(self):
        p = BenchProtocol()
        assert (p.batch_size, p.warmup_iters, p.timed_iters) == (1, 10, 100)
        assert p.statistic == "median"


class TestBenchmark:
    def test_positive_finite_fps(self, tiny_model):
        result = fps_benchmark(tiny_model, quick_protocol())
        assert isinstance(result, BenchResult)
        assert result.fps > 0 and math.isfinite(result.fps)

    def test_dispersion_reported(self, tiny_model):
        result = fps_benchmark(tiny_model, quick_protocol())
        assert len(result.times_s) == 10
        assert result.median_latency_s > 0
        assert result.mean_latency_s > 0
        assert result.std_latency_s >= 0

    def test_fps_is_batch_over_median(self, tiny_model):
        result = fps_benchmark(tiny_model, quick_protocol(batch_size=2))
        assert result.fps == pytest.approx(2 / result.median_latency_s)

    def test_mean_statistic(self, tiny_model):
        result = fps_benchmark(tiny_model, quick_protocol(statistic="mean"))
        assert result.fps == pytest.approx(1 / result.mean_latency_s)
