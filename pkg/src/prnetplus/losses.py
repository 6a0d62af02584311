"""Position, mode and speed-consistency losses and their uncertainty-weighted combination.

All task losses return masked sums over steps; callers divide by the step count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mrdata import NormStats, SpeedDistribution

PAD_LABEL = -1.0
PAD_MODE = -1
UNIT_WEIGHT_S = -math.log(2.0)  # exp(-s)/2 == 1


def mask_from_labels(Y_true) -> np.ndarray:
    """1.0 for real steps, 0.0 where the position label is the [-1, -1] pad."""
    Y_true = np.asarray(Y_true, dtype=float)
    return (~np.all(Y_true == PAD_LABEL, axis=-1)).astype(float)


def loc_loss(Y: Tensor, Y_true, mask) -> Tensor:
    """Sum over unmasked steps of the Euclidean distance between predicted and true positions."""
    Y = ad.as_tensor(Y)
    Y_true = np.asarray(Y_true, dtype=float)
    if Y.shape != Y_true.shape:
        raise ad.ShapeMismatch(f"loc_loss: shapes {Y.shape} and {Y_true.shape} differ")
    dist = ad.norm_lastdim(ad.sub(Y, ad.Tensor(Y_true)))
    return ad.sum_axis(ad.mul(dist, np.asarray(mask, dtype=float)))


def one_hot(modes, num_modes: int) -> np.ndarray:
    """Rows of zeros for the pad sentinel."""
    modes = np.asarray(modes, dtype=np.int64)
    out = np.zeros(modes.shape + (num_modes,))
    ok = modes >= 0
    out[ok, modes[ok]] = 1.0
    return out


def mode_loss(M: Tensor, mode_true, mask) -> Tensor:
    """Negative log-likelihood of the true mode, summed over unmasked steps."""
    M = ad.as_tensor(M)
    target = one_hot(mode_true, M.shape[-1]) * np.asarray(mask, dtype=float)[..., None]
    return ad.scale(ad.sum_axis(ad.mul(ad.log(M), target)), -1.0)


def speed_pair_mask(timestamps, subseq, mask) -> tuple[np.ndarray, int]:
    """Which consecutive step pairs (j-1, j) feed the speed loss, and how many were skipped for a zero gap.

    A pair counts when both steps are real and belong to the same subsequence.
    """
    ts = np.asarray(timestamps, dtype=float)
    subseq = np.asarray(subseq)
    real = np.asarray(mask) > 0
    both = real[:, 1:] & real[:, :-1] & (subseq[:, 1:] == subseq[:, :-1])
    zero = both & (ts[:, 1:] == ts[:, :-1])
    return both & ~zero, int(zero.sum())


def speed_table(v: Tensor, dists: Sequence[SpeedDistribution], interpolate: bool = False) -> Tensor:
    """(P,) speeds in m/s -> (P, C) per-mode probabilities.

    The histogram lookup is piecewise constant, so it passes no gradient to the speed;
    `interpolate` switches to linear interpolation between bin centers, which does.
    """
    v = ad.as_tensor(v)
    if interpolate:
        pairs = [d.lookup_interp(v.data) for d in dists]
        table = np.stack([p for p, _ in pairs], axis=-1)
        slope = np.stack([s for _, s in pairs], axis=-1)
    else:
        table = np.stack([d.lookup(v.data) for d in dists], axis=-1)
        slope = np.zeros_like(table)

    def backward(g):
        v._acc((g * slope).sum(axis=-1))

    return ad._node(table, (v,), backward)


def speed_loss(
    Y: Tensor,
    M: Tensor,
    timestamps,
    subseq,
    mask,
    dists: Sequence[SpeedDistribution],
    stats: NormStats,
    interpolate: bool = False,
    hard_mode: bool = False,
) -> Tensor:
    """Sum of -log(1 + P) over consecutive step pairs, with P the mode-weighted speed likelihood.

    Speeds are measured in meters per second after mapping the unit-box positions back through
    the bounding box. `hard_mode` uses the argmax mode instead of the predicted distribution.
    """
    Y, M = ad.as_tensor(Y), ad.as_tensor(M)
    valid, _ = speed_pair_mask(timestamps, subseq, mask)
    b, j = np.nonzero(valid)
    if b.size == 0:
        return ad.Tensor(0.0)
    ts = np.asarray(timestamps, dtype=float)
    gap = ts[b, j + 1] - ts[b, j]
    meters = np.broadcast_to(np.asarray(stats.unit_scale_m()), (b.size, 2))
    step = ad.mul(ad.sub(ad.take(Y, (b, j + 1)), ad.take(Y, (b, j))), meters)
    speed = ad.mul(ad.norm_lastdim(step), 1.0 / gap)
    table = speed_table(speed, dists, interpolate)
    probs = ad.take(M, (b, j + 1))
    if hard_mode:
        probs = ad.Tensor(one_hot(np.argmax(probs.data, axis=-1), probs.shape[-1]))
    likelihood = ad.sum_axis(ad.mul(probs, table), axis=-1)
    return ad.scale(ad.sum_axis(ad.log(ad.add_scalar(likelihood, 1.0))), -1.0)


Scalar = Union[Tensor, float]


@dataclass
class UncertaintyParams:
    """Log-variances s = log sigma^2 for the position and mode tasks, plus the speed weight.

    Task weights are exp(-s)/2. With `regularize` the s/2 terms are added so s is learnable;
    without it the weights act as fixed constants.
    """

    s1: Scalar = 0.0
    s2: Scalar = 0.0
    alpha: float = 0.05
    regularize: bool = True
    use_loc: bool = True
    use_mode: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @classmethod
    def uniform(cls, alpha: float = 1.0) -> "UncertaintyParams":
        """Every task weighted by exactly 1, no learned variances."""
        return cls(UNIT_WEIGHT_S, UNIT_WEIGHT_S, alpha, regularize=False)

    def weights(self) -> tuple[float, float, float]:
        w1 = math.exp(-_value(self.s1)) / 2 if self.use_loc else 0.0
        w2 = math.exp(-_value(self.s2)) / 2 if self.use_mode else 0.0
        return w1, w2, self.alpha

    def sigmas(self) -> tuple[float, float]:
        return math.exp(_value(self.s1) / 2), math.exp(_value(self.s2) / 2)


def _value(s: Scalar) -> float:
    return s.item() if isinstance(s, Tensor) else float(s)


def _scalar(s: Scalar) -> Tensor:
    s = ad.as_tensor(s)
    return s if s.ndim == 0 else ad.reshape(s, ())


def _task_term(loss: Scalar, s: Scalar, regularize: bool) -> Tensor:
    s = _scalar(s)
    term = ad.mul(ad.scale(ad.exp(ad.scale(s, -1.0)), 0.5), _scalar(loss))
    return ad.add(term, ad.scale(s, 0.5)) if regularize else term


def joint_loss(l_loc: Scalar, l_mode: Scalar, l_speed: Scalar, u: UncertaintyParams) -> Tensor:
    """exp(-s1)/2 * l_loc + exp(-s2)/2 * l_mode + alpha * l_speed + s1/2 + s2/2."""
    total = ad.Tensor(0.0)
    if u.use_loc:
        total = ad.add(total, _task_term(l_loc, u.s1, u.regularize))
    if u.use_mode:
        total = ad.add(total, _task_term(l_mode, u.s2, u.regularize))
    if u.alpha:
        total = ad.add(total, ad.scale(_scalar(l_speed), u.alpha))
    return total


def optimal_log_variance(task_loss: float) -> float:
    """Closed-form minimizer of exp(-s)/2 * l + s/2 over s: s = log l."""
    if task_loss <= 0:
        raise ValueError("task loss must be positive")
    return math.log(task_loss)
