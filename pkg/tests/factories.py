"""Random model inputs and labels for tests that do not need the simulator."""

import numpy as np

from prnetplus.mrdata import Mode, NormStats, SpeedDistribution
from prnetplus.train import EncodedSequence, pad_batch

STATS = NormStats(mean=(0.0,) * 5, std=(1.0,) * 5, lat_min=31.27, lat_max=31.29, lon_min=121.19, lon_max=121.21)


def speed_dists(n_bins=20, width=1.0, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for m in Mode:
        p = rng.uniform(0.1, 1.0, n_bins)
        out.append(SpeedDistribution(m, width, tuple(p / p.sum())))
    return out


def random_sequence(rng, cfg, length, n_subseq=None, unlabeled=0.0):
    """Encoded sequence with random features, sorted timestamps and contiguous subsequences."""
    n_subseq = n_subseq or int(rng.integers(1, length + 1))
    cuts = np.sort(rng.choice(np.arange(1, length), size=min(n_subseq, length) - 1, replace=False)) if length > 1 else []
    subseq = np.zeros(length, dtype=np.int64)
    for c in cuts:
        subseq[c:] += 1
    ts = np.cumsum(rng.integers(1, 30, length)).astype(float)
    pos = rng.uniform(0.05, 0.95, (length, 2))
    modes = rng.integers(0, cfg.num_modes, length)
    drop = rng.random(length) < unlabeled
    pos[drop] = -1.0
    modes[drop] = -1
    return EncodedSequence(rng.standard_normal((length, cfg.F, cfg.N)), ts, subseq, pos, modes)


def random_batch(rng, cfg, lengths, unlabeled=0.0):
    return pad_batch([random_sequence(rng, cfg, n, unlabeled=unlabeled) for n in lengths])
