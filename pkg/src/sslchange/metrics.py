"""Pixel confusion counts and the four change-detection metrics.

Counts are summed over the whole dataset before any ratio is taken, so
metrics do not depend on how images are tiled. A metric whose denominator is
zero is reported as 0.
"""
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch

from .exceptions import DataError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DataError(f"confusion counts must be non-negative: {self}")

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self):
        return asdict(self)


class Metrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    iou: float


def _as_bool(mask, what):
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise DataError(f"{what} is not binary; found values {values[:6]}")
    return arr.astype(bool)


def accumulate(pred, gt, counts=None):
    """Add the pixel tallies of one (pred, gt) pair to ``counts``."""
    p = _as_bool(pred, "prediction")
    g = _as_bool(gt, "ground truth")
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    new = ConfusionCounts(tp, fp, fn, tn)
    return new if counts is None else counts + new


def _ratio(num, den):
    return num / den if den else 0.0


def compute_metrics(counts):
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    iou = _ratio(counts.tp, counts.tp + counts.fn + counts.fp)
    return Metrics(precision, recall, f1, iou)


def metrics_report(counts):
    """Flat dict with all four metrics and the raw counts (for metrics.json)."""
    return {**compute_metrics(counts)._asdict(), **counts.as_dict()}
