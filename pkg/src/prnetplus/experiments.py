"""Dataset perturbations, evaluation and the variant / sweep harness."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps

from .metrics import ErrorReport, compute_errors, majority_share, mode_accuracy
from .mrdata import MRSample, MRSequence, NormStats, build_sequences
from .prnet import ModelConfig
from .simgen import SimConfig, generate_dataset, resolve_config
from .train import TrainConfig, encode_sequence, predict_encoded, prepare, split_for, train

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("variant", "alpha", "fold", "seed", "median_m", "mean_m", "p90_m", "mode_acc", "majority", "wall_s")
AGGREGATE_METRICS = ("median_m", "mean_m", "p90_m", "mode_acc")
ENCODER_VARIANTS = {"prnet_l": "local", "prnet_g": "global"}
SWEEP_AXES = ("time_interval", "station_density")

Series = dict[str, list[MRSample]]


# --- perturbations -------------------------------------------------------------


def thin_series(samples: Sequence[MRSample], target_s: float, rng: np.random.Generator) -> list[MRSample]:
    """Keep samples so consecutive kept gaps land in [0.8, 1.2] x target where possible.

    From the last kept sample, pick uniformly among later samples whose gap falls in the window;
    if none does, take the first sample at least 0.8 x target away. Stop when none is left.
    """
    if not samples:
        return []
    ts = np.asarray([s.timestamp for s in samples], dtype=float)
    lo, hi = 0.8 * target_s, 1.2 * target_s
    keep = [0]
    i = 0
    while True:
        gaps = ts[i + 1 :] - ts[i]
        window = np.flatnonzero((gaps >= lo) & (gaps <= hi))
        if window.size:
            i = i + 1 + int(rng.choice(window))
        else:
            beyond = np.flatnonzero(gaps >= lo)
            if not beyond.size:
                break
            i = i + 1 + int(beyond[0])
        keep.append(i)
    return [samples[k] for k in keep]


def subsample_time_interval(series: Series, target_s: float, seed: int) -> Series:
    """Thin every device's series toward `target_s` second gaps; re-segment the result afterwards."""
    if target_s <= 0:
        raise ValueError("target interval must be positive")
    out = {}
    for n, imsi in enumerate(sorted(series)):
        rng = np.random.default_rng([seed, n])
        out[imsi] = thin_series(series[imsi], target_s, rng)
    return out


def station_ids(series: Series) -> list[tuple[int, int]]:
    return sorted({r.station_id for ss in series.values() for s in ss for r in s.stations})


def drop_stations(series: Series, fraction: float, seed: int) -> Series:
    """Keep a random `fraction` of all station ids; delete the rest from every sample.

    Readings stay strongest-first, so the next strongest survivor becomes the serving station.
    Samples left with no readings are removed.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    ids = station_ids(series)
    n_keep = max(1, int(round(fraction * len(ids))))
    chosen = np.random.default_rng(seed).choice(len(ids), size=n_keep, replace=False)
    kept = {ids[i] for i in chosen}
    out = {}
    for imsi, ss in series.items():
        new = []
        for s in ss:
            readings = tuple(r for r in s.stations if r.station_id in kept)
            if readings:
                new.append(s if len(readings) == len(s.stations) else replace(s, stations=readings))
        out[imsi] = new
    return out


# --- evaluation ------------------------------------------------------------------


@dataclass
class Evaluation:
    errors: ErrorReport
    mode_acc: float
    majority: float
    predictions: list = field(default_factory=list, repr=False)  # per sequence: (lat, lon, probs)


def evaluate(store, mcfg: ModelConfig, stats: NormStats, sequences: Sequence[MRSequence]) -> Evaluation:
    """Predict every labeled test sequence and score positions (meters) and modes."""
    encoded = [encode_sequence(s, stats, mcfg.N) for s in sequences]
    preds = predict_encoded(store, mcfg, encoded)
    pred_ll, true_ll, true_modes, probs, out = [], [], [], [], []
    for seq, enc, (pos, mp) in zip(sequences, encoded, preds):
        lat, lon = stats.from_unit(pos[:, 0], pos[:, 1])
        out.append((lat, lon, mp))
        for k, s in enumerate(seq.samples):
            if s.position_label is not None:
                pred_ll.append((lat[k], lon[k]))
                true_ll.append(s.position_label)
                true_modes.append(enc.modes[k])
                probs.append(mp[k])
    modes = np.asarray(true_modes)
    report = compute_errors(np.asarray(pred_ll), np.asarray(true_ll), modes, stats.projection)
    return Evaluation(report, mode_accuracy(np.asarray(probs), modes), majority_share(modes), out)


# --- experiment grid ----------------------------------------------------------------


@dataclass
class ExperimentSpec:
    sim: SimConfig = field(default_factory=lambda: resolve_config("desk_small"))
    variants: tuple[str, ...] = ("full",)
    alphas: tuple[float, ...] = (0.05,)
    seeds: tuple[int, ...] = (1,)
    folds: tuple[int, ...] = (0,)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "variants": list(self.variants),
            "alphas": list(self.alphas),
            "seeds": list(self.seeds),
            "folds": list(self.folds),
            "train": self.train.to_dict(),
            "model": self.model.to_dict(),
        }


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def spec_from_file(path, **overrides) -> ExperimentSpec:
    """[experiment] variants/alphas/seeds/folds plus the [train] and [model] sections of the same file."""
    from .train import model_config_from_file

    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    kw = {}
    if cp.has_section("experiment"):
        e = cp["experiment"]
        if "variants" in e:
            kw["variants"] = tuple(v.strip() for v in e["variants"].split(",") if v.strip())
        if "alphas" in e:
            kw["alphas"] = _floats(e["alphas"])
        if "seeds" in e:
            kw["seeds"] = _ints(e["seeds"])
        if "folds" in e:
            kw["folds"] = _ints(e["folds"])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec(
        sim=SimConfig.from_file(path),
        train=TrainConfig.from_file(path),
        model=model_config_from_file(path),
        **kw,
    )


def variant_configs(variant: str, alpha: float, base: TrainConfig, model: ModelConfig):
    """Map a harness variant name to (TrainConfig, ModelConfig)."""
    if variant in ENCODER_VARIANTS:
        return replace(base, variant="full", alpha=alpha), replace(model, encoder=ENCODER_VARIANTS[variant])
    return replace(base, variant=variant, alpha=alpha), model


class DatasetCache:
    """Sequences per (sim config, seed, perturbation), built once and shared across cells."""

    def __init__(self):
        self._store: dict = {}

    def sequences(self, sim: SimConfig, seed: int, tau: int, perturb=None, key=None) -> list[MRSequence]:
        k = (json.dumps(sim.to_dict(), sort_keys=True), seed, tau, key)
        if k not in self._store:
            series = generate_dataset(sim, seed).series
            if perturb is not None:
                series = perturb(series)
            self._store[k] = build_sequences(series, tau)
        return self._store[k]


def run_cell(sequences: Sequence[MRSequence], variant: str, alpha: float, fold: int, seed: int,
             base: TrainConfig, model: ModelConfig) -> dict:
    """Train one (variant, alpha, fold, seed) cell and score it on its held-out fold."""
    tcfg, mcfg = variant_configs(variant, alpha, replace(base, fold=fold, seed=seed), model)
    train_seqs, test_seqs = split_for(list(sequences), tcfg)
    start = time.perf_counter()
    prepared = prepare(train_seqs, mcfg)
    result = train(train_seqs, tcfg, mcfg, prepared=prepared)
    ev = evaluate(result.store, mcfg, prepared[0], test_seqs)
    return {
        "variant": variant,
        "alpha": alpha,
        "fold": fold,
        "seed": seed,
        "median_m": ev.errors.median_m,
        "mean_m": ev.errors.mean_m,
        "p90_m": ev.errors.p90_m,
        "mode_acc": ev.mode_acc,
        "majority": ev.majority,
        "wall_s": time.perf_counter() - start,
    }


def run_experiment(spec: ExperimentSpec, out_dir=None, cache: Optional[DatasetCache] = None) -> list[dict]:
    """Every variant x alpha x seed x fold; writes results.csv and aggregate.csv when `out_dir` is given.

    Alpha only varies for variants whose loss uses it; others run once at the first alpha.
    """
    cache = cache or DatasetCache()
    rows = []
    for variant in spec.variants:
        alphas = spec.alphas if variant in ("full", *ENCODER_VARIANTS) else spec.alphas[:1]
        for alpha in alphas:
            for seed in spec.seeds:
                seqs = cache.sequences(spec.sim, seed, spec.train.tau)
                for fold in spec.folds:
                    row = run_cell(seqs, variant, alpha, fold, seed, spec.train, spec.model)
                    log.info("%s", row)
                    rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "results.csv", rows, RESULT_COLUMNS)
        agg = aggregate(rows)
        write_rows(out / "aggregate.csv", agg, list(agg[0]) if agg else ["variant"])
        (out / "config.json").write_text(json.dumps(spec.to_dict(), indent=2))
    return rows


def aggregate(rows: Sequence[dict], keys=("variant", "alpha")) -> list[dict]:
    """Mean and std of each metric per group; std is the population std over runs."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        row = dict(zip(keys, key))
        row["runs"] = len(rs)
        for m in AGGREGATE_METRICS:
            vals = np.asarray([r[m] for r in rs], dtype=float)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        out.append(row)
    return out


def seed_means(rows: Sequence[dict], variant: str, metric: str, alpha: Optional[float] = None) -> dict[int, float]:
    """Per-seed mean of `metric` over folds for one variant (and alpha)."""
    acc: dict[int, list[float]] = {}
    for r in rows:
        if r["variant"] == variant and (alpha is None or r["alpha"] == alpha):
            acc.setdefault(r["seed"], []).append(r[metric])
    return {s: float(np.mean(v)) for s, v in sorted(acc.items())}


def write_rows(path, rows: Sequence[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# --- sweeps -----------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]
    seeds: tuple[int, ...] = (1, 2, 3)
    fold: int = 0

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"axis must be one of {SWEEP_AXES}")
        lo, hi = (3.0, 120.0) if self.axis == "time_interval" else (0.25, 1.0)
        if not self.values or any(not lo <= v <= hi for v in self.values):
            raise ValueError(f"{self.axis} values must lie in [{lo}, {hi}]")


def _perturbation(axis: str, value: float, seed: int):
    if axis == "time_interval":
        return lambda series: subsample_time_interval(series, value, seed)
    return lambda series: drop_stations(series, value, seed)


@dataclass
class TrendReport:
    axis: str
    rho: float
    p_value: float
    expected_sign: int
    holds: bool
    means: dict

    def to_dict(self) -> dict:
        return asdict(self)


def trend_test(values, errors, expected_sign: int, level: float = 0.05) -> tuple[float, float, bool]:
    """Two-sided Spearman test; the trend holds when p < level and rho has the expected sign."""
    res = sps.spearmanr(values, errors)
    rho, p = float(res.statistic), float(res.pvalue)
    return rho, p, bool(p < level and np.sign(rho) == expected_sign)


def run_sweep(sweep: SweepSpec, sim: SimConfig, base: TrainConfig, model: ModelConfig,
              out_dir=None, cache: Optional[DatasetCache] = None) -> tuple[list[dict], TrendReport]:
    """Retrain the full model at every sweep value and seed; test whether error trends the expected way.

    Error should rise with the sampling interval and fall as more stations are kept.
    """
    cache = cache or DatasetCache()
    rows = []
    for value in sweep.values:
        for seed in sweep.seeds:
            seqs = cache.sequences(sim, seed, base.tau, _perturbation(sweep.axis, value, seed), (sweep.axis, value))
            row = run_cell(seqs, "full", base.alpha, sweep.fold, seed, base, model)
            row[sweep.axis] = value
            rows.append(row)
    sign = 1 if sweep.axis == "time_interval" else -1
    rho, p, holds = trend_test([r[sweep.axis] for r in rows], [r["median_m"] for r in rows], sign)
    means = {v: float(np.mean([r["median_m"] for r in rows if r[sweep.axis] == v])) for v in sweep.values}
    report = TrendReport(sweep.axis, rho, p, sign, holds, means)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "sweep.csv", rows, (sweep.axis,) + RESULT_COLUMNS)
        (out / "trend.json").write_text(json.dumps(report.to_dict(), indent=2))
    return rows, report
