"""Synthetic world, mobility and radio generator producing labeled MR datasets."""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geo import Projection
from .mrdata import (
    MAX_STATIONS,
    RSSI_MAX,
    RSSI_MIN,
    Mode,
    MRSample,
    StationReading,
    write_mr_csv,
    write_registry,
)

DEFAULT_SPEED_RANGES = {
    Mode.WALKING: (0.5, 2.0),
    Mode.CYCLING: (2.0, 7.0),
    Mode.DRIVING: (5.0, 20.0),
}

# Gap buckets (inclusive integer seconds) and their shares, from a real 2G collection.
DEFAULT_INTERVALS = (
    ((1, 3), 0.7132),
    ((4, 5), 0.1708),
    ((6, 10), 0.0814),
    ((11, 30), 0.0177),
    ((31, 60), 0.0134),
    ((61, 125), 0.0035),
)


@dataclass(frozen=True)
class IntervalDistribution:
    buckets: tuple[tuple[tuple[int, int], float], ...] = DEFAULT_INTERVALS

    def __post_init__(self):
        masses = np.array([m for _, m in self.buckets])
        if np.any(masses < 0) or masses.sum() <= 0:
            raise ValueError("interval masses must be non-negative with positive total")

    @classmethod
    def constant(cls, gap: int) -> "IntervalDistribution":
        return cls((((gap, gap), 1.0),))

    def draw(self, rng: np.random.Generator, size: Optional[int] = None):
        masses = np.array([m for _, m in self.buckets], dtype=float)
        masses = masses / masses.sum()
        n = 1 if size is None else size
        which = rng.choice(len(self.buckets), size=n, p=masses)
        lo = np.array([self.buckets[i][0][0] for i in which])
        hi = np.array([self.buckets[i][0][1] for i in which])
        gaps = lo + np.floor(rng.random(n) * (hi - lo + 1)).astype(np.int64)
        return int(gaps[0]) if size is None else gaps


@dataclass(frozen=True)
class SignalModel:
    p0_dbm: float = -22.0
    gamma: float = 3.0
    shadow_std_db: float = 4.0
    max_range_m: float = 800.0
    shadow_corr_m: float = 0.0  # length scale of the spatial shadowing field; 0 draws independently per sample
    fading_std_db: float = 0.0  # extra per-sample noise on top of the field

    def __post_init__(self):
        if not 2.0 <= self.gamma <= 4.0:
            raise ValueError("path-loss exponent must lie in [2, 4]")
        if self.shadow_corr_m < 0:
            raise ValueError("shadowing correlation distance must be >= 0")
        if self.shadow_std_db < 0 or self.fading_std_db < 0:
            raise ValueError("shadowing and fading std must be >= 0")

    def mean_rssi(self, d_m):
        return self.p0_dbm - 10.0 * self.gamma * np.log10(np.maximum(d_m, 1.0))


@dataclass(frozen=True)
class ModeSchedule:
    legs: tuple[tuple[Mode, float], ...]
    speed_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SPEED_RANGES))

    def __post_init__(self):
        if not self.legs:
            raise ValueError("schedule must have at least one leg")
        if any(d <= 0 for _, d in self.legs):
            raise ValueError("leg durations must be positive")

    @property
    def duration(self) -> float:
        return float(sum(d for _, d in self.legs))

    def mode_at(self, t: float) -> Mode:
        acc = 0.0
        for mode, d in self.legs:
            acc += d
            if t < acc:
                return mode
        return self.legs[-1][0]

    def leg_end(self, t: float) -> float:
        acc = 0.0
        for _, d in self.legs:
            acc += d
            if t < acc:
                return acc
        return math.inf


@dataclass(frozen=True)
class Station:
    rncid: int
    cellid: int
    x: float
    y: float
    lat: float
    lon: float


@dataclass
class World:
    width_m: float
    height_m: float
    projection: Projection
    stations: list[Station]
    nodes: np.ndarray  # (V, 2) road vertices in meters
    adjacency: dict[int, list[int]]
    seed: int
    # random Fourier features of each station's shadowing field: frequencies (S, M, 2), phases (S, M)
    shadow_freq: Optional[np.ndarray] = None
    shadow_phase: Optional[np.ndarray] = None

    @property
    def polylines(self) -> list[tuple[tuple[float, float], tuple[float, float]]]:
        out = []
        for u, nbrs in self.adjacency.items():
            for v in nbrs:
                if u < v:
                    out.append((tuple(self.nodes[u]), tuple(self.nodes[v])))
        return out

    def station_xy(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.stations])

    def registry(self) -> dict:
        return {(s.rncid, s.cellid): (s.lat, s.lon) for s in self.stations}

    def area_km2(self) -> float:
        return self.width_m * self.height_m / 1e6

    def shadow_at(self, x: float, y: float) -> np.ndarray:
        """Unit-variance shadowing of every station at (x, y), smooth in space."""
        m = self.shadow_freq.shape[1]
        arg = self.shadow_freq[..., 0] * x + self.shadow_freq[..., 1] * y + self.shadow_phase
        return math.sqrt(2.0 / m) * np.cos(arg).sum(axis=1)


@dataclass(frozen=True)
class SimConfig:
    width_km: float = 1.414
    height_km: float = 1.414
    origin_lat: float = 31.2800
    origin_lon: float = 121.2000
    station_density: float = 25.0  # stations per km^2
    exact_count: bool = False
    road_spacing_m: float = 200.0
    diagonal_prob: float = 0.25
    mode_mix: tuple[float, float, float] = (0.60, 0.25, 0.15)
    legs_per_trajectory: int = 2
    leg_duration_s: float = 150.0
    n_trajectories: int = 200
    start_time: int = 1524474000
    intervals: IntervalDistribution = IntervalDistribution()
    signal: SignalModel = SignalModel()
    speed_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SPEED_RANGES))

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        return cls.from_parser(cp)

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser) -> "SimConfig":
        kw: dict = {}
        if cp.has_section("world"):
            w = cp["world"]
            for key in ("width_km", "height_km", "origin_lat", "origin_lon", "station_density", "road_spacing_m", "diagonal_prob"):
                if key in w:
                    kw[key] = w.getfloat(key)
            if "exact_count" in w:
                kw["exact_count"] = w.getboolean("exact_count")
        if cp.has_section("modes"):
            m = cp["modes"]
            if "mix" in m:
                kw["mode_mix"] = tuple(float(v) for v in m["mix"].split(","))
            if "legs_per_trajectory" in m:
                kw["legs_per_trajectory"] = m.getint("legs_per_trajectory")
            if "leg_duration_s" in m:
                kw["leg_duration_s"] = m.getfloat("leg_duration_s")
            ranges = dict(DEFAULT_SPEED_RANGES)
            for mode in Mode:
                key = f"{mode.name.lower()}_speed"
                if key in m:
                    lo, hi = (float(v) for v in m[key].split(","))
                    ranges[mode] = (lo, hi)
            kw["speed_ranges"] = ranges
        if cp.has_section("sampling") and "intervals" in cp["sampling"]:
            buckets = []
            for item in cp["sampling"]["intervals"].split(";"):
                rng_s, mass = item.split(":")
                lo, hi = (int(v) for v in rng_s.split("-"))
                buckets.append(((lo, hi), float(mass)))
            kw["intervals"] = IntervalDistribution(tuple(buckets))
        if cp.has_section("signal"):
            s = cp["signal"]
            kw["signal"] = SignalModel(
                p0_dbm=s.getfloat("p0_dbm", SignalModel.p0_dbm),
                gamma=s.getfloat("gamma", SignalModel.gamma),
                shadow_std_db=s.getfloat("shadow_std_db", SignalModel.shadow_std_db),
                max_range_m=s.getfloat("max_range_m", SignalModel.max_range_m),
                shadow_corr_m=s.getfloat("shadow_corr_m", SignalModel.shadow_corr_m),
                fading_std_db=s.getfloat("fading_std_db", SignalModel.fading_std_db),
            )
        if cp.has_section("dataset"):
            d = cp["dataset"]
            if "n_trajectories" in d:
                kw["n_trajectories"] = d.getint("n_trajectories")
            if "start_time" in d:
                kw["start_time"] = d.getint("start_time")
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speed_ranges"] = {m.name.lower(): list(r) for m, r in self.speed_ranges.items()}
        d["intervals"] = [[list(b), m] for b, m in self.intervals.buckets]
        return d


PRESETS = {
    "desk_small": SimConfig(
        station_density=25.0, exact_count=True, legs_per_trajectory=4, signal=SignalModel(shadow_corr_m=50.0)
    ),
    # suburban 2G deployment: larger area, slightly denser stations, mostly walking
    "suburban_2g": SimConfig(
        width_km=1.2923, height_km=1.2923, station_density=26.34, mode_mix=(0.601, 0.252, 0.141)
    ),
}


SHADOW_FEATURES = 64


def _rng(seed, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *keys]))


def build_world(config: SimConfig, seed: int) -> World:
    """Scatter stations (Poisson) and lay a jittered grid road network with diagonal shortcuts."""
    if config.station_density <= 0:
        raise ValueError("station density must be positive")
    rng = _rng(seed, 0)
    w, h = config.width_km * 1000.0, config.height_km * 1000.0
    proj = Projection(config.origin_lat, config.origin_lon)
    expected = config.station_density * w * h / 1e6
    count = int(round(expected)) if config.exact_count else int(rng.poisson(expected))
    count = max(count, 1)
    xs = rng.uniform(0, w, count)
    ys = rng.uniform(0, h, count)
    stations = []
    for i, (x, y) in enumerate(zip(xs, ys)):
        lat, lon = proj.to_latlon(x, y)
        stations.append(Station(6180 + i % 4, 20000 + i, float(x), float(y), float(lat), float(lon)))

    nx = max(int(w // config.road_spacing_m) + 1, 2)
    ny = max(int(h // config.road_spacing_m) + 1, 2)
    gx = np.linspace(0.05 * w, 0.95 * w, nx)
    gy = np.linspace(0.05 * h, 0.95 * h, ny)
    jitter = 0.15 * min(w / nx, h / ny)
    nodes = np.array([[x, y] for y in gy for x in gx])
    nodes += rng.uniform(-jitter, jitter, nodes.shape)
    nodes[:, 0] = np.clip(nodes[:, 0], 0, w)
    nodes[:, 1] = np.clip(nodes[:, 1], 0, h)
    adjacency: dict[int, list[int]] = {i: [] for i in range(len(nodes))}

    def link(a, b):
        adjacency[a].append(b)
        adjacency[b].append(a)

    for j in range(ny):
        for i in range(nx):
            k = j * nx + i
            if i + 1 < nx:
                link(k, k + 1)
            if j + 1 < ny:
                link(k, k + nx)
            if i + 1 < nx and j + 1 < ny and rng.random() < config.diagonal_prob:
                if rng.random() < 0.5:
                    link(k, k + nx + 1)
                else:
                    link(k + 1, k + nx)
    freq = phase = None
    if config.signal.shadow_corr_m > 0:
        frng = _rng(seed, 5)
        freq = frng.normal(0.0, 1.0 / config.signal.shadow_corr_m, (len(stations), SHADOW_FEATURES, 2))
        phase = frng.uniform(0.0, 2 * math.pi, (len(stations), SHADOW_FEATURES))
    return World(w, h, proj, stations, nodes, adjacency, seed, freq, phase)


@dataclass(frozen=True)
class TrajectoryPoint:
    timestamp: int
    lat: float
    lon: float
    mode: Mode
    x: float
    y: float
    odometer_m: float  # path length travelled since the start


def simulate_trajectory(
    world: World,
    schedule: ModeSchedule,
    sampling: IntervalDistribution,
    seed,
    start_time: int = 0,
    constant_speed: bool = False,
) -> list[TrajectoryPoint]:
    """Random walk along the road graph; one speed per road segment drawn from the active mode's range."""
    rng = _rng(seed, 1) if isinstance(seed, (int, np.integer)) else seed
    ranges = schedule.speed_ranges
    u = int(rng.integers(len(world.nodes)))
    prev = -1

    def next_node(cur, came_from):
        nbrs = world.adjacency[cur]
        options = [n for n in nbrs if n != came_from] or nbrs
        return options[int(rng.integers(len(options)))]

    v = next_node(u, prev)
    along = 0.0
    t = 0.0
    odo = 0.0
    mode = schedule.mode_at(0.0)
    fixed_speed = float(rng.uniform(*ranges[mode]))
    speed = fixed_speed

    def position():
        a, b = world.nodes[u], world.nodes[v]
        seg = float(np.hypot(*(b - a)))
        f = along / seg if seg > 0 else 0.0
        return a + f * (b - a)

    def emit():
        x, y = position()
        lat, lon = world.projection.to_latlon(x, y)
        return TrajectoryPoint(int(start_time + round(t)), float(lat), float(lon), schedule.mode_at(t), float(x), float(y), odo)

    points = [emit()]
    end = schedule.duration
    while True:
        gap = float(sampling.draw(rng))
        if t + gap > end:
            break
        target = t + gap
        while t < target - 1e-9:
            leg_end = schedule.leg_end(t)
            cur_mode = schedule.mode_at(t)
            if cur_mode != mode:
                mode = cur_mode
                speed = fixed_speed if constant_speed else float(rng.uniform(*ranges[mode]))
            seg = float(np.hypot(*(world.nodes[v] - world.nodes[u])))
            t_edge = (seg - along) / speed
            dt = min(target - t, leg_end - t, t_edge)
            along += speed * dt
            odo += speed * dt
            t += dt
            if dt == t_edge or along >= seg - 1e-9:
                prev, u = u, v
                v = next_node(u, prev)
                along = 0.0
                if not constant_speed:
                    speed = float(rng.uniform(*ranges[mode]))
        t = target
        points.append(emit())
    return points


def _asu(rssi: float) -> int:
    return int(np.clip(round((rssi + 113.0) / 2.0), 0, 31))


def _signal_level(rssi: float) -> int:
    return int(np.digitize(rssi, [-110.0, -105.0, -95.0, -85.0]))


def synthesize_mr(
    world: World,
    trajectory: list[TrajectoryPoint],
    signal: SignalModel,
    seed,
    imsi: str = "sim",
) -> tuple[list[MRSample], int]:
    """Log-distance path loss plus Gaussian shadowing; keep the 7 strongest in-range stations.

    With `signal.shadow_corr_m` > 0 the shadowing is read from the world's spatial field, so every
    device sees the same fingerprint at the same place; its marginal is still close to N(0, std^2).
    Returns the samples and the number of positions dropped for lack of coverage.
    """
    if not trajectory:
        raise ValueError("trajectory is empty")
    rng = _rng(seed, 2) if isinstance(seed, (int, np.integer)) else seed
    sxy = world.station_xy()
    ids = np.array([[s.rncid, s.cellid] for s in world.stations])
    samples, dropped = [], 0
    spatial = signal.shadow_corr_m > 0 and world.shadow_freq is not None
    for p in trajectory:
        d = np.hypot(sxy[:, 0] - p.x, sxy[:, 1] - p.y)
        shadow = world.shadow_at(p.x, p.y) if spatial else rng.normal(0.0, 1.0, len(d))
        rssi = signal.mean_rssi(d) + shadow * signal.shadow_std_db
        if signal.fading_std_db > 0:
            rssi = rssi + rng.normal(0.0, signal.fading_std_db, len(d))
        visible = np.flatnonzero((d <= signal.max_range_m) & (rssi >= RSSI_MIN))
        if visible.size == 0:
            dropped += 1
            continue
        order = sorted(visible, key=lambda k: (-rssi[k], ids[k, 0], ids[k, 1]))[:MAX_STATIONS]
        readings = []
        for k in order:
            r = float(min(rssi[k], RSSI_MAX))
            st = world.stations[k]
            readings.append(StationReading(st.rncid, st.cellid, st.lat, st.lon, _asu(r), _signal_level(r), r))
        samples.append(MRSample(p.timestamp, imsi, tuple(readings), p.mode, (p.lat, p.lon)))
    return samples, dropped


def allocate_modes(mix, n_legs: int, rng: np.random.Generator) -> list[Mode]:
    """Exact largest-remainder allocation of legs to modes, shuffled."""
    mix = np.asarray(mix, dtype=float)
    mix = mix / mix.sum()
    raw = mix * n_legs
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n_legs - counts.sum()]:
        counts[i] += 1
    legs = [Mode(i) for i, c in enumerate(counts) for _ in range(c)]
    rng.shuffle(legs)
    return legs


@dataclass
class SimDataset:
    config: SimConfig
    seed: int
    world: World
    series: dict[str, list[MRSample]]
    trajectories: dict[str, list[TrajectoryPoint]]
    no_coverage: int = 0

    def samples(self) -> list[MRSample]:
        return [s for imsi in sorted(self.series) for s in self.series[imsi]]


def generate_dataset(config: SimConfig, seed: int, out_dir=None) -> SimDataset:
    """Build a world and simulate every device; optionally write MR CSV, registry and manifest."""
    world = build_world(config, seed)
    modes = allocate_modes(config.mode_mix, config.n_trajectories * config.legs_per_trajectory, _rng(seed, 3))
    series, trajectories = {}, {}
    lost = 0
    for i in range(config.n_trajectories):
        legs = modes[i * config.legs_per_trajectory : (i + 1) * config.legs_per_trajectory]
        schedule = ModeSchedule(tuple((m, config.leg_duration_s) for m in legs), config.speed_ranges)
        imsi = f"4600{seed % 1000:03d}{i:06d}"
        traj = simulate_trajectory(world, schedule, config.intervals, _rng(seed, 10, i), start_time=config.start_time + 900 * i)
        samples, dropped = synthesize_mr(world, traj, config.signal, _rng(seed, 20, i), imsi=imsi)
        lost += dropped
        if samples:
            series[imsi] = samples
            trajectories[imsi] = traj
    ds = SimDataset(config, seed, world, series, trajectories, lost)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: SimDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_mr_csv(out / "mr.csv", ds.samples())
    write_registry(out / "stations.csv", ds.world.registry())
    manifest = {
        "seed": ds.seed,
        "config": ds.config.to_dict(),
        "n_stations": len(ds.world.stations),
        "n_series": len(ds.series),
        "n_samples": sum(len(v) for v in ds.series.values()),
        "no_coverage_dropped": ds.no_coverage,
        "files": {"mr": "mr.csv", "registry": "stations.csv"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def resolve_config(path_or_preset: Optional[str]) -> SimConfig:
    if path_or_preset is None:
        return PRESETS["desk_small"]
    if path_or_preset in PRESETS:
        return PRESETS[path_or_preset]
    return SimConfig.from_file(path_or_preset)

