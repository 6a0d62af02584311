"""Measurement-record (MR) data model, CSV ingestion, handoff segmentation and features."""

from __future__ import annotations

import csv
import logging
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

from .geo import Projection

log = logging.getLogger(__name__)

MAX_STATIONS = 7
NUM_FEATURES = 7
HASH_BUCKETS = 64
RSSI_MIN, RSSI_MAX = -120.0, -30.0
STD_FLOOR = 1e-8

# Row order of the per-station feature column.
FEATURE_NAMES = ("station_lat", "station_lon", "rnc_bucket", "cell_bucket", "asu_level", "signal_level", "rssi")
# Indices (into FEATURE_NAMES) of the z-normalized features; NormStats mean/std follow this order.
CONTINUOUS = (0, 1, 4, 5, 6)


class Mode(IntEnum):
    WALKING = 0
    CYCLING = 1
    DRIVING = 2

    @classmethod
    def parse(cls, text) -> "Mode":
        if isinstance(text, (int, np.integer)):
            return cls(int(text))
        text = str(text).strip()
        if text.isdigit():
            return cls(int(text))
        return cls[text.upper()]


class MRDataError(Exception):
    pass


class MalformedRow(MRDataError):
    pass


class UnknownStation(MRDataError):
    pass


class InsufficientData(MRDataError):
    pass


StationId = tuple[int, int]
ABSENT: StationId = (-1, -1)


@dataclass(frozen=True)
class StationReading:
    rncid: int
    cellid: int
    station_lat: Optional[float]
    station_lon: Optional[float]
    asu_level: int
    signal_level: int
    rssi: float

    @property
    def station_id(self) -> StationId:
        return (self.rncid, self.cellid)


@dataclass(frozen=True)
class MRSample:
    timestamp: int
    imsi: str
    stations: tuple[StationReading, ...]
    mode_label: Optional[Mode] = None
    position_label: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not self.stations:
            raise ValueError("MRSample needs at least one station reading")
        if len(self.stations) > MAX_STATIONS:
            raise ValueError(f"at most {MAX_STATIONS} stations per sample, got {len(self.stations)}")

    @property
    def serving_id(self) -> StationId:
        return self.stations[0].station_id

    @property
    def second_id(self) -> StationId:
        return self.stations[1].station_id if len(self.stations) > 1 else ABSENT


@dataclass(frozen=True)
class ColumnSchema:
    time_col: str = "MRTime"
    imsi_col: str = "IMSI"
    n_stations: int = MAX_STATIONS
    station_fields: tuple[str, ...] = ("RNCID", "CellID", "AsuLevel", "SignalLevel", "RSSI")
    lat_col: str = "Lat"
    lon_col: str = "Lon"
    mode_col: str = "Mode"

    def station_columns(self, k: int) -> list[str]:
        return [f"{name}_{k}" for name in self.station_fields]

    def required(self) -> list[str]:
        cols = [self.time_col, self.imsi_col]
        for k in range(1, self.n_stations + 1):
            cols += self.station_columns(k)
        return cols

    def header(self, labels: bool = True) -> list[str]:
        cols = self.required()
        if labels:
            cols += [self.lat_col, self.lon_col, self.mode_col]
        return cols


@dataclass
class ParsedMR:
    """Result of reading an MR CSV: time-sorted series per IMSI plus cleaning counters."""

    series: dict[str, list[MRSample]]
    dropped_rows: int = 0
    empty_imsis: list[str] = field(default_factory=list)

    def all_samples(self) -> list[MRSample]:
        return [s for imsi in sorted(self.series) for s in self.series[imsi]]


def parse_timestamp(text: str) -> int:
    text = text.strip()
    try:
        return int(float(text))
    except ValueError:
        pass
    for fmt in ("%Y/%m/%d %H:%M:%S", "%Y/%m/%d %H:%M"):
        try:
            dt = datetime.strptime(text, fmt)
            break
        except ValueError:
            continue
    else:
        dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def load_registry(path) -> dict[StationId, tuple[float, float]]:
    registry = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            registry[(int(row["RNCID"]), int(row["CellID"]))] = (float(row["Lat"]), float(row["Lon"]))
    return registry


def write_registry(path, registry: dict[StationId, tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["RNCID", "CellID", "Lat", "Lon"])
        for (rnc, cell), (lat, lon) in sorted(registry.items()):
            w.writerow([rnc, cell, f"{lat:.8f}", f"{lon:.8f}"])


def _blank(v: Optional[str]) -> bool:
    return v is None or v.strip() == ""


def _reading(cells: Sequence[str], registry) -> Optional[StationReading]:
    rnc, cell, asu, sig, rssi = cells
    if _blank(rnc) or _blank(cell) or _blank(rssi):
        return None
    rssi_v = float(rssi)
    if rssi_v == 0.0:
        return None
    rncid, cellid = int(float(rnc)), int(float(cell))
    coords = registry.get((rncid, cellid)) if registry is not None else None
    return StationReading(
        rncid=rncid,
        cellid=cellid,
        station_lat=coords[0] if coords else None,
        station_lon=coords[1] if coords else None,
        asu_level=0 if _blank(asu) else int(float(asu)),
        signal_level=0 if _blank(sig) else int(float(sig)),
        rssi=min(max(rssi_v, RSSI_MIN), RSSI_MAX),
    )


def parse_mr_csv(path, schema: ColumnSchema = ColumnSchema(), registry=None) -> ParsedMR:
    """Read an MR CSV into per-IMSI, time-sorted sample series.

    Rows whose serving station has an empty id or an empty/zero RSSI are dropped
    and counted. A row whose cell count differs from the header raises MalformedRow.
    """
    groups: dict[str, list[MRSample]] = defaultdict(list)
    seen: dict[str, None] = {}
    dropped = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return ParsedMR({})
        missing = [c for c in schema.required() if c not in header]
        if missing:
            raise MalformedRow(f"header is missing columns: {missing}")
        col = {name: i for i, name in enumerate(header)}
        has_pos = schema.lat_col in col and schema.lon_col in col
        has_mode = schema.mode_col in col
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRow(f"line {lineno}: expected {len(header)} cells, got {len(row)}")
            imsi = row[col[schema.imsi_col]].strip()
            seen.setdefault(imsi)
            readings = []
            for k in range(1, schema.n_stations + 1):
                r = _reading([row[col[c]] for c in schema.station_columns(k)], registry)
                if r is None:
                    if k == 1:
                        break
                    continue
                readings.append(r)
            if not readings:
                dropped += 1
                continue
            position = None
            if has_pos and not _blank(row[col[schema.lat_col]]) and not _blank(row[col[schema.lon_col]]):
                position = (float(row[col[schema.lat_col]]), float(row[col[schema.lon_col]]))
            mode = None
            if has_mode and not _blank(row[col[schema.mode_col]]):
                mode = Mode.parse(row[col[schema.mode_col]])
            groups[imsi].append(
                MRSample(parse_timestamp(row[col[schema.time_col]]), imsi, tuple(readings), mode, position)
            )
    empty = [imsi for imsi in seen if imsi not in groups]
    for imsi in empty:
        log.warning("EmptySeries: imsi %s has no valid rows", imsi)
    series = {imsi: sorted(samples, key=lambda s: s.timestamp) for imsi, samples in groups.items()}
    return ParsedMR(series, dropped, empty)


def write_mr_csv(path, samples: Iterable[MRSample], schema: ColumnSchema = ColumnSchema(), labels: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.header(labels))
        for s in samples:
            row: list = [s.timestamp, s.imsi]
            for k in range(schema.n_stations):
                if k < len(s.stations):
                    r = s.stations[k]
                    row += [r.rncid, r.cellid, r.asu_level, r.signal_level, f"{r.rssi:.2f}"]
                else:
                    row += [""] * len(schema.station_fields)
            if labels:
                if s.position_label is not None:
                    row += [f"{s.position_label[0]:.8f}", f"{s.position_label[1]:.8f}"]
                else:
                    row += ["", ""]
                row.append(s.mode_label.name.lower() if s.mode_label is not None else "")
            w.writerow(row)


# --- sequences -------------------------------------------------------------


@dataclass(frozen=True)
class MRSequence:
    samples: tuple[MRSample, ...]
    serving_id: StationId
    subsequence_bounds: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def imsi(self) -> str:
        return self.samples[0].imsi

    def subsequence_index(self) -> np.ndarray:
        idx = np.empty(len(self.samples), dtype=np.int64)
        for i, (a, b) in enumerate(self.subsequence_bounds):
            idx[a : b + 1] = i
        return idx


def runs(keys: Sequence) -> list[tuple[int, int]]:
    """Inclusive (start, end) bounds of maximal runs of equal consecutive keys."""
    bounds = []
    start = 0
    for i in range(1, len(keys) + 1):
        if i == len(keys) or keys[i] != keys[start]:
            bounds.append((start, i - 1))
            start = i
    return bounds


def merge_short_runs(lengths: Sequence[int], tau: int) -> list[list[int]]:
    """Group consecutive run indices so every group totals >= tau samples.

    Greedy forward pass: a short group absorbs its successor; a short final group
    is folded into its predecessor.
    """
    groups: list[list[int]] = []
    cur: list[int] = []
    total = 0
    for i, n in enumerate(lengths):
        cur.append(i)
        total += n
        if total >= tau:
            groups.append(cur)
            cur, total = [], 0
    if cur:
        if groups:
            groups[-1].extend(cur)
        else:
            groups.append(cur)
    return groups


def segment_sequences(series: Sequence[MRSample], tau: int = 1) -> list[MRSequence]:
    """Cut one IMSI's time-sorted series at serving-station handoffs, merging short runs."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if not series:
        return []
    bounds = runs([s.serving_id for s in series])
    out = []
    for group in merge_short_runs([b - a + 1 for a, b in bounds], tau):
        parts = [bounds[i] for i in group]
        longest = max(parts, key=lambda ab: ab[1] - ab[0])
        samples = tuple(series[parts[0][0] : parts[-1][1] + 1])
        serving = series[longest[0]].serving_id
        out.append(MRSequence(samples, serving, tuple(split_subsequences(samples))))
    return out


def subsequence_key(sample: MRSample) -> StationId:
    return sample.second_id


def split_subsequences(samples) -> list[tuple[int, int]]:
    """Maximal runs of constant first non-serving station; an absent second station is its own key."""
    if isinstance(samples, MRSequence):
        samples = samples.samples
    if len(samples) == 0:
        raise ValueError("cannot split an empty sequence")
    return runs([subsequence_key(s) for s in samples])


def build_sequences(series_by_imsi: dict[str, list[MRSample]], tau: int) -> list[MRSequence]:
    seqs = []
    for imsi in sorted(series_by_imsi):
        seqs.extend(segment_sequences(series_by_imsi[imsi], tau))
    return seqs


# --- features --------------------------------------------------------------


def hash_bucket(*parts: int) -> float:
    key = ":".join(str(p) for p in parts).encode()
    return (zlib.crc32(key) % HASH_BUCKETS) / (HASH_BUCKETS - 1)


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    @property
    def projection(self) -> Projection:
        return Projection((self.lat_min + self.lat_max) / 2, (self.lon_min + self.lon_max) / 2)

    def unit_scale_m(self) -> tuple[float, float]:
        """Meters spanned by one unit of normalized (lat, lon)."""
        p = self.projection
        return ((self.lat_max - self.lat_min) * p.m_per_deg_lat, (self.lon_max - self.lon_min) * p.m_per_deg_lon)

    def to_unit(self, lat, lon):
        u = (np.asarray(lat, dtype=float) - self.lat_min) / (self.lat_max - self.lat_min)
        v = (np.asarray(lon, dtype=float) - self.lon_min) / (self.lon_max - self.lon_min)
        return u, v

    def from_unit(self, u, v):
        lat = self.lat_min + np.asarray(u, dtype=float) * (self.lat_max - self.lat_min)
        lon = self.lon_min + np.asarray(v, dtype=float) * (self.lon_max - self.lon_min)
        return lat, lon

    def to_dict(self) -> dict:
        return {
            "mean": list(self.mean),
            "std": list(self.std),
            "bbox": [self.lat_min, self.lat_max, self.lon_min, self.lon_max],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(d["mean"]), tuple(d["std"]), *d["bbox"])


def _continuous(r: StationReading) -> tuple[float, ...]:
    return (r.station_lat, r.station_lon, float(r.asu_level), float(r.signal_level), r.rssi)


def fit_norm_stats(samples: Iterable[MRSample], margin: float = 0.05) -> NormStats:
    """Fit feature moments and a label bounding box on training samples only."""
    rows, lats, lons = [], [], []
    for s in samples:
        for r in s.stations:
            if r.station_lat is not None:
                rows.append(_continuous(r))
        if s.position_label is not None:
            lats.append(s.position_label[0])
            lons.append(s.position_label[1])
    if not rows or not lats:
        raise InsufficientData("need labeled samples with known stations to fit normalization")
    arr = np.asarray(rows, dtype=float)
    mean = arr.mean(axis=0)
    std = np.maximum(arr.std(axis=0), STD_FLOOR)

    def padded(lo, hi):
        pad = max(margin * (hi - lo), 1e-4)
        return lo - pad, hi + pad

    lat_min, lat_max = padded(min(lats), max(lats))
    lon_min, lon_max = padded(min(lons), max(lons))
    return NormStats(tuple(mean.tolist()), tuple(std.tolist()), lat_min, lat_max, lon_min, lon_max)


def featurize(sample: MRSample, stats: NormStats, n_stations: int = MAX_STATIONS) -> np.ndarray:
    """F x N feature matrix; column n describes the n-th strongest station, absent columns stay zero."""
    X = np.zeros((NUM_FEATURES, n_stations))
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    for n, r in enumerate(sample.stations[:n_stations]):
        if r.station_lat is None or r.station_lon is None:
            continue  # unknown station: treated as absent
        z = (np.asarray(_continuous(r)) - mean) / std
        X[list(CONTINUOUS), n] = z
        X[2, n] = hash_bucket(r.rncid)
        X[3, n] = hash_bucket(r.rncid, r.cellid)
    return X


# --- speed distributions ---------------------------------------------------


@dataclass(frozen=True)
class SpeedDistribution:
    mode: Mode
    bin_width: float
    probabilities: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.probabilities)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("speed probabilities must be non-negative and sum to 1")

    @property
    def n_bins(self) -> int:
        return len(self.probabilities)

    def bin_index(self, speed):
        v = np.nan_to_num(np.asarray(speed, dtype=float), nan=0.0, posinf=self.bin_width * self.n_bins)
        idx = np.floor(np.clip(v, 0.0, self.bin_width * self.n_bins) / self.bin_width).astype(np.int64)
        return np.clip(idx, 0, self.n_bins - 1)

    def lookup(self, speed):
        """Histogram probability of the bin containing `speed` (last bin absorbs overflow)."""
        return np.asarray(self.probabilities)[self.bin_index(speed)]

    def lookup_interp(self, speed):
        """Piecewise-linear interpolation between bin centers; returns (value, slope)."""
        p = np.asarray(self.probabilities)
        top = self.bin_width * self.n_bins
        pos = np.clip(np.nan_to_num(np.asarray(speed, dtype=float), nan=0.0, posinf=top), 0.0, top) / self.bin_width - 0.5
        lo = np.clip(np.floor(pos).astype(np.int64), 0, self.n_bins - 1)
        hi = np.clip(lo + 1, 0, self.n_bins - 1)
        frac = np.clip(pos - lo, 0.0, 1.0)
        inside = (pos > 0) & (pos < self.n_bins - 1)
        value = np.where(inside, p[lo] + frac * (p[hi] - p[lo]), p[np.clip(np.rint(pos).astype(np.int64), 0, self.n_bins - 1)])
        slope = np.where(inside, (p[hi] - p[lo]) / self.bin_width, 0.0)
        return value, slope

    def to_dict(self) -> dict:
        return {"mode": self.mode.name.lower(), "bin_width": self.bin_width, "probabilities": list(self.probabilities)}

    @classmethod
    def from_dict(cls, d: dict) -> "SpeedDistribution":
        return cls(Mode.parse(d["mode"]), float(d["bin_width"]), tuple(d["probabilities"]))


def speed_pairs(series_list: Iterable[Sequence[MRSample]], mode: Mode, projection: Optional[Projection] = None):
    """Ground-truth speeds (m/s) between consecutive labeled samples both tagged with `mode`."""
    speeds = []
    for series in series_list:
        for a, b in zip(series[:-1], series[1:]):
            if a.mode_label != mode or b.mode_label != mode:
                continue
            if a.position_label is None or b.position_label is None or b.timestamp <= a.timestamp:
                continue
            proj = projection or Projection(a.position_label[0], a.position_label[1])
            d = float(proj.distance_m(a.position_label[0], a.position_label[1], b.position_label[0], b.position_label[1]))
            speeds.append(d / (b.timestamp - a.timestamp))
    return np.asarray(speeds)


def distribution_from_speeds(speeds, mode: Mode, bin_width: float = 0.5, n_bins: int = 60) -> SpeedDistribution:
    speeds = np.asarray(speeds, dtype=float)
    if speeds.size < 2:
        raise InsufficientData(f"need at least 2 speed pairs for {mode.name.lower()}, got {speeds.size}")
    idx = np.clip(np.floor(speeds / bin_width).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(float)
    probs = counts / counts.sum()
    # renormalize the rounding residue so the sum is exact to 1e-9
    probs[np.argmax(probs)] += 1.0 - probs.sum()
    return SpeedDistribution(mode, bin_width, tuple(probs.tolist()))


def estimate_speed_distribution(
    series_list: Iterable[Sequence[MRSample]],
    mode: Mode,
    bin_width: float = 0.5,
    n_bins: int = 60,
    projection: Optional[Projection] = None,
) -> SpeedDistribution:
    return distribution_from_speeds(speed_pairs(series_list, mode, projection), mode, bin_width, n_bins)
