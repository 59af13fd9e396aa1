"""Binary segmentation of surgical instruments in laparoscopy frames."""

__version__ = "0.1.0"

from .data import Manifest, SampleRecord, scan_dataset, split_manifest  # noqa: F401
from .losses import DiceLossConfig, dice_loss  # noqa: F401
from .metrics import (ConfusionCounts, MetricsReport, aggregate_metrics,  # noqa: F401
                      confusion, metrics_from_counts)
from .model import (DecoderBlockSpec, EncoderSpec, ModelConfig,  # noqa: F401
                    SegmentationModel, build_model, count_parameters,
                    full_config, fuse_skips, tiny_config)
from .transforms import AugmentationConfig, augment, binarize_mask, load_sample  # noqa: F401
