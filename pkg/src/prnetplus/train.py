"""Mini-batch training: padding, masking, fold splits, the optimization loop and run persistence."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .losses import (
    PAD_LABEL,
    PAD_MODE,
    UNIT_WEIGHT_S,
    UncertaintyParams,
    joint_loss,
    loc_loss,
    mode_loss,
    speed_loss,
    speed_pair_mask,
)
from .mrdata import (
    InsufficientData,
    Mode,
    MRSequence,
    NormStats,
    SpeedDistribution,
    estimate_speed_distribution,
    featurize,
    fit_norm_stats,
)
from .prnet import ModelConfig, SequenceOutput, init_params, prnet_forward

log = logging.getLogger(__name__)

VARIANTS = ("full", "pos_only", "mode_only", "uniform_weights", "no_speed")
LR_SCHEDULES = ("constant", "cosine")
FLAT_BIN_WIDTH, FLAT_BINS = 0.5, 60
TRACE_COLUMNS = ("epoch", "l_loc", "l_mode", "l_speed", "joint", "sigma1", "sigma2")


class FoldOutOfRange(ValueError):
    pass


class Diverged(RuntimeError):
    def __init__(self, message: str, store: ad.ParamStore, epoch: int):
        super().__init__(message)
        self.store = store
        self.epoch = epoch


class PaddingLeak(AssertionError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.0005
    alpha: float = 0.05
    tau: int = 8
    seed: int = 0
    k: int = 5
    fold: int = 0
    holdout: bool = False  # single 80/20 split instead of k folds
    variant: str = "full"
    clip_norm: float = 5.0
    lr_schedule: str = "constant"  # or "cosine": anneal to zero over the run
    speed_interp: bool = False
    hard_mode: bool = False
    debug: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine" and self.epochs > 0:
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_file(cls, path, section: str = "train", **overrides) -> "TrainConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        values = {}
        if cp.has_section(section):
            types = {f.name: f.type for f in fields(cls)}
            for key, raw in cp.items(section):
                if key not in types:
                    raise ValueError(f"unknown [{section}] key {key!r}")
                values[key] = _coerce(raw, getattr(cls, key))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return type(default)(raw)


def model_config_from_file(path, section: str = "model", **overrides) -> ModelConfig:
    cp = configparser.ConfigParser()
    cp.read(path)
    values = {}
    if cp.has_section(section):
        base = ModelConfig()
        names = {f.name.lower(): f.name for f in fields(ModelConfig)}
        for key, raw in cp.items(section):
            if key not in names:
                raise ValueError(f"unknown [{section}] key {key!r}")
            values[names[key]] = _coerce(raw, getattr(base, names[key]))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig(**values)


# --- encoding and padding ----------------------------------------------------


@dataclass
class EncodedSequence:
    features: np.ndarray  # (L, F, N)
    timestamps: np.ndarray  # (L,)
    subseq: np.ndarray  # (L,)
    positions: np.ndarray  # (L, 2) in the unit box, [-1, -1] if unlabeled
    modes: np.ndarray  # (L,) mode index, -1 if unlabeled

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def delta_t(self) -> np.ndarray:
        """Seconds since the previous step of the same subsequence; 0 at subsequence starts."""
        dt = np.zeros(len(self))
        same = self.subseq[1:] == self.subseq[:-1]
        dt[1:] = np.where(same, np.diff(self.timestamps), 0.0)
        return dt


def encode_sequence(seq: MRSequence, stats: NormStats, n_stations: int) -> EncodedSequence:
    L = len(seq)
    pos = np.full((L, 2), PAD_LABEL)
    modes = np.full(L, PAD_MODE, dtype=np.int64)
    for i, s in enumerate(seq.samples):
        if s.position_label is not None:
            u, v = stats.to_unit(*s.position_label)
            pos[i] = np.clip([u, v], 0.0, 1.0)
        if s.mode_label is not None:
            modes[i] = int(s.mode_label)
    return EncodedSequence(
        np.stack([featurize(s, stats, n_stations) for s in seq.samples]),
        np.asarray([s.timestamp for s in seq.samples], dtype=float),
        seq.subsequence_index(),
        pos,
        modes,
    )


@dataclass
class Batch:
    features: np.ndarray  # (B, L, F, N), zero-padded
    delta_t: np.ndarray  # (B, L)
    timestamps: np.ndarray  # (B, L)
    subseq: np.ndarray  # (B, L), padded steps repeat the last id
    positions: np.ndarray  # (B, L, 2), [-1, -1] padded
    modes: np.ndarray  # (B, L), -1 padded
    mask: np.ndarray  # (B, L), 1 for labeled real steps
    steps: np.ndarray  # (B, L), 1 for real steps, labeled or not

    @property
    def n_steps(self) -> int:
        return int(self.mask.sum())


def pad_batch(sequences: Sequence[EncodedSequence]) -> Batch:
    if not sequences:
        raise ValueError("cannot pad an empty batch")
    B = len(sequences)
    L = max(len(s) for s in sequences)
    F, N = sequences[0].features.shape[1:]
    features = np.zeros((B, L, F, N))
    delta_t = np.zeros((B, L))
    ts = np.zeros((B, L))
    subseq = np.zeros((B, L), dtype=np.int64)
    positions = np.full((B, L, 2), PAD_LABEL)
    modes = np.full((B, L), PAD_MODE, dtype=np.int64)
    steps = np.zeros((B, L))
    for b, s in enumerate(sequences):
        n = len(s)
        features[b, :n] = s.features
        delta_t[b, :n] = s.delta_t
        ts[b, :n] = s.timestamps
        ts[b, n:] = s.timestamps[-1]
        subseq[b, :n] = s.subseq
        subseq[b, n:] = s.subseq[-1]
        positions[b, :n] = s.positions
        modes[b, :n] = s.modes
        steps[b, :n] = 1.0
    # unlabeled steps are masked like padding
    mask = steps * ~np.all(positions == PAD_LABEL, axis=-1)
    return Batch(features, delta_t, ts, subseq, positions, modes, mask, steps)


def make_batches(n_items: int, lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Bucket by length: sort (ties shuffled), chunk, then shuffle the chunk order."""
    order = np.lexsort((rng.permutation(n_items), np.asarray(lengths)))
    chunks = [order[i : i + batch_size].tolist() for i in range(0, n_items, batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


# --- splitting ------------------------------------------------------------------


def kfold_split(items: Sequence, k: int, fold: int, seed: int):
    """Shuffle by seed, cut into k near-equal disjoint test folds, return (train, test) for `fold`."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if not 0 <= fold < k:
        raise FoldOutOfRange(f"fold {fold} outside [0, {k})")
    perm = np.random.default_rng(seed).permutation(len(items))
    parts = np.array_split(perm, k)
    test_idx = set(parts[fold].tolist())
    train = [items[i] for i in perm if i not in test_idx]
    test = [items[i] for i in parts[fold]]
    return train, test


def holdout_split(items: Sequence, seed: int, test_fraction: float = 0.2):
    perm = np.random.default_rng(seed).permutation(len(items))
    n_test = int(round(test_fraction * len(items)))
    return [items[i] for i in perm[n_test:]], [items[i] for i in perm[:n_test]]


def split_for(items: Sequence, config: TrainConfig):
    if config.holdout:
        return holdout_split(items, config.seed)
    return kfold_split(items, config.k, config.fold, config.seed)


# --- losses per variant ------------------------------------------------------------


def head_names(store: ad.ParamStore, prefix: str) -> list[str]:
    return [n for n in store.names() if n.startswith(prefix)]


def untrained_heads(store: ad.ParamStore, variant: str) -> list[str]:
    """Head parameters a single-task variant never updates (left out of its checkpoint)."""
    if variant == "pos_only":
        return head_names(store, "mode.")
    if variant == "mode_only":
        return head_names(store, "pos.")
    return []


def trainable_names(store: ad.ParamStore, variant: str) -> list[str]:
    frozen = set(untrained_heads(store, variant))
    if variant not in ("full", "no_speed"):
        frozen |= {"unc.s1", "unc.s2"}
    return [n for n in store.names() if n not in frozen]


def uncertainty_for(store: ad.ParamStore, config: TrainConfig) -> UncertaintyParams:
    v = config.variant
    if v == "uniform_weights":
        return UncertaintyParams.uniform(alpha=1.0)
    if v == "pos_only":
        return UncertaintyParams(UNIT_WEIGHT_S, UNIT_WEIGHT_S, 0.0, regularize=False, use_mode=False)
    if v == "mode_only":
        return UncertaintyParams(UNIT_WEIGHT_S, UNIT_WEIGHT_S, 0.0, regularize=False, use_loc=False)
    alpha = 0.0 if v == "no_speed" else config.alpha
    return UncertaintyParams(store.tensor("unc.s1"), store.tensor("unc.s2"), alpha)


@dataclass
class BatchLoss:
    joint: ad.Tensor
    l_loc: float
    l_mode: float
    l_speed: float
    zero_gaps: int
    output: SequenceOutput


def batch_loss(
    batch: Batch,
    store: ad.ParamStore,
    mcfg: ModelConfig,
    config: TrainConfig,
    dists: Sequence[SpeedDistribution],
    stats: NormStats,
    features=None,
) -> BatchLoss:
    """Forward both heads and combine the per-step task losses for the configured variant."""
    x = batch.features if features is None else features
    out = prnet_forward(x, batch.delta_t, batch.subseq, batch.steps, store, mcfg)
    n = max(batch.n_steps, 1)
    u = uncertainty_for(store, config)
    l_loc = ad.scale(loc_loss(out.positions, batch.positions, batch.mask), 1.0 / n)
    l_mode = ad.scale(mode_loss(out.mode_probs, batch.modes, batch.mask), 1.0 / n)
    _, zero_gaps = speed_pair_mask(batch.timestamps, batch.subseq, batch.mask)
    if u.alpha:
        l_speed = ad.scale(
            speed_loss(out.positions, out.mode_probs, batch.timestamps, batch.subseq, batch.mask, dists, stats,
                       interpolate=config.speed_interp, hard_mode=config.hard_mode),
            1.0 / n,
        )
    else:
        l_speed = ad.Tensor(0.0)
    joint = joint_loss(l_loc, l_mode, l_speed, u)
    return BatchLoss(joint, l_loc.item(), l_mode.item(), l_speed.item(), zero_gaps, out)


def check_padding_gradients(batch: Batch, store: ad.ParamStore, mcfg, config, dists, stats) -> None:
    """Backward from the joint loss into the raw features; padded steps must receive exactly zero."""
    x = ad.Tensor(batch.features, requires_grad=True)
    probe = store.copy()
    with ad.Tape() as tape:
        res = batch_loss(batch, probe, mcfg, config, dists, stats, features=x)
    tape.backward(res.joint)
    pad = batch.steps == 0
    if x.grad is not None and np.any(x.grad[pad] != 0.0):
        raise PaddingLeak("gradient reached padded steps")


# --- training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    store: ad.ParamStore
    trace: list[dict]
    model_config: ModelConfig
    config: TrainConfig
    stats: NormStats
    dists: list[SpeedDistribution]
    zero_gaps: int = 0
    extra: dict = field(default_factory=dict)


def estimate_dists(sequences: Sequence[MRSequence], stats: NormStats) -> list[SpeedDistribution]:
    """Per-mode speed histograms; a mode with too few labeled pairs gets a flat histogram."""
    series = [s.samples for s in sequences]
    out = []
    for m in Mode:
        try:
            out.append(estimate_speed_distribution(series, m, projection=stats.projection))
        except InsufficientData:
            log.warning("too few %s speed pairs; using a flat speed histogram", m.name.lower())
            out.append(SpeedDistribution(m, FLAT_BIN_WIDTH, (1.0 / FLAT_BINS,) * FLAT_BINS))
    return out


def prepare(sequences: Sequence[MRSequence], mcfg: ModelConfig, stats: Optional[NormStats] = None):
    """Fit normalization (unless given) and speed histograms on `sequences`, then encode them."""
    if stats is None:
        stats = fit_norm_stats(s for seq in sequences for s in seq.samples)
    dists = estimate_dists(sequences, stats)
    encoded = [encode_sequence(s, stats, mcfg.N) for s in sequences]
    return stats, dists, encoded


def train(
    sequences: Sequence[MRSequence],
    config: TrainConfig,
    mcfg: ModelConfig = ModelConfig(),
    out_dir=None,
    store: Optional[ad.ParamStore] = None,
    prepared=None,
) -> TrainResult:
    """Algorithm: for each epoch, for each length-bucketed batch, joint loss -> backward -> clip -> Adam."""
    if not sequences and prepared is None:
        raise ValueError("need at least one training sequence")
    stats, dists, encoded = prepared if prepared is not None else prepare(sequences, mcfg)
    store = init_params(mcfg, config.seed) if store is None else store
    names = trainable_names(store, config.variant)
    rng = np.random.default_rng([config.seed, 1])
    lengths = [len(e) for e in encoded]
    trace = []
    zero_gaps = 0
    last_good = store.copy()
    for epoch in range(config.epochs):
        sums = np.zeros(4)
        weight = 0
        for idx in make_batches(len(encoded), lengths, config.batch_size, rng):
            batch = pad_batch([encoded[i] for i in idx])
            if batch.n_steps == 0:
                continue
            store.zero_grad()
            with ad.Tape() as tape:
                res = batch_loss(batch, store, mcfg, config, dists, stats)
            j = res.joint.item()
            if not math.isfinite(j):
                if out_dir is not None:
                    save_run(out_dir, TrainResult(last_good, trace, mcfg, config, stats, list(dists)))
                raise Diverged(f"joint loss became {j} at epoch {epoch}", last_good, epoch)
            tape.backward(res.joint)
            store.clip_grad_norm(config.clip_norm, names)
            ad.adam_step(store, lr=config.lr_at(epoch), names=names)
            zero_gaps += res.zero_gaps
            sums += batch.n_steps * np.array([res.l_loc, res.l_mode, res.l_speed, j])
            weight += batch.n_steps
        if config.debug and encoded:
            check_padding_gradients(pad_batch(encoded[: config.batch_size]), store, mcfg, config, dists, stats)
        s1, s2 = uncertainty_for(store, config).sigmas()
        means = sums / max(weight, 1)
        trace.append(dict(zip(TRACE_COLUMNS, [epoch, *means.tolist(), s1, s2])))
        last_good = store.copy()
        log.debug("epoch %d joint %.5f", epoch, means[3])
    if zero_gaps:
        log.warning("skipped %d zero-gap step pairs in the speed loss", zero_gaps)
    result = TrainResult(store, trace, mcfg, config, stats, list(dists), zero_gaps)
    if out_dir is not None:
        save_run(out_dir, result)
    return result


# --- inference -------------------------------------------------------------------------


def predict_encoded(store: ad.ParamStore, mcfg: ModelConfig, encoded: Sequence[EncodedSequence], batch_size: int = 64):
    """Per-sequence (unit-box positions (L, 2), mode probabilities (L, C))."""
    out = [None] * len(encoded)
    order = np.argsort([len(e) for e in encoded], kind="stable")
    for i in range(0, len(order), batch_size):
        idx = order[i : i + batch_size]
        batch = pad_batch([encoded[j] for j in idx])
        pred = prnet_forward(batch.features, batch.delta_t, batch.subseq, batch.steps, store, mcfg)
        for b, j in enumerate(idx):
            n = len(encoded[j])
            out[j] = (pred.positions.data[b, :n].copy(), pred.mode_probs.data[b, :n].copy())
    return out


# --- persistence --------------------------------------------------------------------


def write_trace(path, trace: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in trace:
            w.writerow(row)


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def save_run(out_dir, result: TrainResult) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(result.store, out / "checkpoint.bin", exclude=untrained_heads(result.store, result.config.variant))
    write_trace(out / "loss_trace.csv", result.trace)
    manifest = {
        "model": result.model_config.to_dict(),
        "train": result.config.to_dict(),
        "norm_stats": result.stats.to_dict(),
        "speed_distributions": [d.to_dict() for d in result.dists],
        "zero_gaps": result.zero_gaps,
        **result.extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


@dataclass
class LoadedRun:
    store: ad.ParamStore
    model_config: ModelConfig
    config: TrainConfig
    stats: NormStats
    dists: list[SpeedDistribution]
    manifest: dict


def load_run(run_dir) -> LoadedRun:
    """Rebuild a trained run; parameters absent from the checkpoint keep a fresh initialization."""
    d = Path(run_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    mcfg = ModelConfig.from_dict(manifest["model"])
    tcfg = TrainConfig.from_dict(manifest["train"])
    store = init_params(mcfg, tcfg.seed)
    with warnings.catch_warnings():
        if tcfg.variant in ("pos_only", "mode_only"):
            warnings.simplefilter("ignore")
        ad.load_into(store, d / "checkpoint.bin")
    return LoadedRun(
        store,
        mcfg,
        tcfg,
        NormStats.from_dict(manifest["norm_stats"]),
        [SpeedDistribution.from_dict(x) for x in manifest["speed_distributions"]],
        manifest,
    )
