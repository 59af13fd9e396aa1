"""Pixel confusion counts and the evaluation metric suite.

All table metrics (dice, mIoU, recall, precision, F2, accuracy) derive from
per-frame tp/fp/fn/tn counts. Counts add component-wise, so frames can be
evaluated in parallel and merged in any order; metrics computed from summed
counts equal the single-pass global computation exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import EmptyList, ShapeMismatch

METRIC_NAMES = ("dice", "miou", "recall", "precision", "f2", "accuracy")
CSV_COLUMNS = ("method",) + METRIC_NAMES + ("fps",)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    dice: float = 0.0
    miou: float = 0.0
    recall: float = 0.0
    precision: float = 0.0
    f2: float = 0.0
    accuracy: float = 0.0
    fps: float | None = None
    n_frames: int = 1

    def to_json_dict(self):
        return asdict(self)


def confusion(pred, target, threshold=0.5):
    """Binarize ``pred`` at ``>= threshold`` and tally per-pixel counts."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    p = pred >= threshold
    g = target > 0
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def metrics_from_counts(counts, empty_value=1.0):
    """Derive the metric suite from one frame's confusion counts.

    When target and prediction are both empty the overlap ratios score
    ``empty_value`` (1.0 by default, matching challenge practice for frames
    without instruments); when exactly one side is empty the affected ratios
    are 0.
    """
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn

    def ratio(num, den):
        return num / den if den > 0 else empty_value

    both_empty = (tp + fp + fn) == 0
    dice = ratio(2 * tp, 2 * tp + fp + fn)
    miou = ratio(tp, tp + fp + fn)
    recall = empty_value if both_empty else (tp / (tp + fn) if tp + fn > 0 else 0.0)
    precision = empty_value if both_empty else (tp / (tp + fp) if tp + fp > 0 else 0.0)
    f2 = 5 * precision * recall / (4 * precision + recall) if precision + recall > 0 else 0.0
    accuracy = ratio(tp + tn, counts.total)
    return MetricsReport(dice=dice, miou=miou, recall=recall, precision=precision,
                         f2=f2, accuracy=accuracy, n_frames=1)


def aggregate_metrics(per_frame):
    """Unweighted per-frame mean of every metric."""
    per_frame = list(per_frame)
    if not per_frame:
        raise EmptyList("no frames to aggregate")
    out = MetricsReport(n_frames=sum(r.n_frames for r in per_frame))
    for name in METRIC_NAMES:
        setattr(out, name, sum(getattr(r, name) for r in per_frame) / len(per_frame))
    return out


def write_report_json(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")


def write_report_csv(rows, path):
    """Write one CSV row per (method, MetricsReport) pair in table order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for method, report in rows:
            writer.writerow([method] + [repr(getattr(report, m)) for m in METRIC_NAMES]
                            + ["" if report.fps is None else repr(report.fps)])


def format_markdown_table(rows):
    """Render (method, MetricsReport) rows as markdown, bolding column bests."""
    rows = list(rows)
    header = list(CSV_COLUMNS)
    best = {}
    for col in METRIC_NAMES + ("fps",):
        values = [getattr(r, col) for _, r in rows if getattr(r, col) is not None]
        best[col] = max(values) if values else None
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    for method, report in rows:
        cells = [method]
        for col in METRIC_NAMES + ("fps",):
            value = getattr(report, col)
            if value is None:
                cells.append("")
                continue
            text = f"{value:.4f}"
            if len(rows) > 1 and value == best[col]:
                text = f"**{text}**"
            cells.append(text)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
