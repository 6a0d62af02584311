"""Localization error statistics and mode accuracy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .geo import Projection


class EmptyInput(ValueError):
    pass


def lower_median(sorted_values: np.ndarray) -> float:
    n = len(sorted_values)
    return float(sorted_values[(n - 1) // 2])


def p90(sorted_values: np.ndarray) -> float:
    n = len(sorted_values)
    return float(sorted_values[math.ceil(0.9 * n) - 1])


@dataclass
class ErrorReport:
    median_m: float
    mean_m: float
    p90_m: float
    count: int
    per_mode: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(errors) -> ErrorReport:
    e = np.sort(np.asarray(errors, dtype=float))
    if e.size == 0:
        raise EmptyInput("no errors to summarize")
    return ErrorReport(lower_median(e), float(e.mean()), p90(e), int(e.size))


def error_distances(pred, true, projection: Optional[Projection] = None) -> np.ndarray:
    """Meters between (lat, lon) rows under an equirectangular projection centered on the truth."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    true = np.asarray(true, dtype=float).reshape(-1, 2)
    if pred.shape != true.shape:
        raise ValueError(f"shapes {pred.shape} and {true.shape} differ")
    if pred.size == 0:
        raise EmptyInput("no positions given")
    if projection is None:
        projection = Projection(float(true[:, 0].mean()), float(true[:, 1].mean()))
    return np.asarray(projection.distance_m(pred[:, 0], pred[:, 1], true[:, 0], true[:, 1]), dtype=float)


def compute_errors(pred, true, modes=None, projection: Optional[Projection] = None) -> ErrorReport:
    """Median (lower middle), mean and 90th-percentile error in meters, optionally split by true mode."""
    d = error_distances(pred, true, projection)
    report = summarize(d)
    if modes is not None:
        modes = np.asarray(modes)
        for m in np.unique(modes[modes >= 0]):
            sub = summarize(d[modes == m])
            report.per_mode[int(m)] = {"median_m": sub.median_m, "mean_m": sub.mean_m, "p90_m": sub.p90_m, "count": sub.count}
    return report


def mode_accuracy(probs, modes, mask=None) -> float:
    """Argmax agreement over unmasked steps; np.argmax breaks ties toward the lowest index."""
    probs = np.asarray(probs, dtype=float)
    modes = np.asarray(modes)
    keep = np.ones(modes.shape, dtype=bool) if mask is None else np.asarray(mask) > 0
    keep &= modes >= 0
    if not keep.any():
        raise EmptyInput("no unmasked steps")
    return float((np.argmax(probs, axis=-1)[keep] == modes[keep]).mean())


def majority_share(modes) -> float:
    modes = np.asarray(modes)
    modes = modes[modes >= 0]
    if modes.size == 0:
        raise EmptyInput("no labeled steps")
    return float(np.bincount(modes).max() / modes.size)
