import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import reading, sample_with, second_series, serving_series
from prnetplus import mrdata
from prnetplus.mrdata import (
    ABSENT,
    ColumnSchema,
    MalformedRow,
    Mode,
    MRSample,
    NormStats,
    InsufficientData,
    build_sequences,
    distribution_from_speeds,
    featurize,
    fit_norm_stats,
    merge_short_runs,
    parse_mr_csv,
    segment_sequences,
    split_subsequences,
    write_mr_csv,
)

A, B, C = (1, 1), (1, 2), (2, 3)


# --- parsing ---------------------------------------------------------------


def write_rows(path, rows, header=None):
    header = header or ColumnSchema().header(labels=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")


def row(t, imsi, stations, lat="", lon="", mode=""):
    cells = [str(t), imsi]
    for k in range(7):
        if k < len(stations):
            rnc, cell, rssi = stations[k]
            cells += [str(rnc), str(cell), "20", "3", str(rssi)]
        else:
            cells += ["", "", "", "", ""]
    return cells + [lat, lon, mode]


def test_parse_first_station_is_serving(tmp_path):
    p = tmp_path / "mr.csv"
    write_rows(p, [row(10, "X", [(6188, 26051, -74.5), (6188, 26052, -80.0)])])
    s = parse_mr_csv(p).series["X"][0]
    assert s.stations[0].station_id == (6188, 26051)
    assert s.stations[0].rssi == -74.5
    assert s.serving_id == (6188, 26051)


def test_parse_empty_file_has_no_groups(tmp_path):
    p = tmp_path / "mr.csv"
    write_rows(p, [])
    assert parse_mr_csv(p).series == {}


@pytest.mark.parametrize("order", list(itertools.permutations([5, 2, 9])))
def test_parse_sorts_each_imsi_by_time(tmp_path, order):
    p = tmp_path / "mr.csv"
    write_rows(p, [row(t, "X", [(1, 1, -60)]) for t in order])
    assert [s.timestamp for s in parse_mr_csv(p).series["X"]] == [2, 5, 9]


def test_parse_drops_rows_without_serving_signal(tmp_path):
    p = tmp_path / "mr.csv"
    write_rows(p, [
        row(1, "X", [(1, 1, -60)]),
        row(2, "X", [(1, 1, 0)]),
        row(3, "X", [("", "", -60)]),
        row(4, "Y", [(1, 1, 0)]),
    ])
    parsed = parse_mr_csv(p)
    assert [s.timestamp for s in parsed.series["X"]] == [1]
    assert parsed.dropped_rows == 3
    assert parsed.empty_imsis == ["Y"]


def test_parse_rejects_ragged_row(tmp_path):
    p = tmp_path / "mr.csv"
    write_rows(p, [row(1, "X", [(1, 1, -60)])[:-1]])
    with pytest.raises(MalformedRow):
        parse_mr_csv(p)


def test_parse_iso_timestamps_and_labels(tmp_path):
    p = tmp_path / "mr.csv"
    write_rows(p, [row("2018-04-23T09:00:00", "X", [(1, 1, -60)], "31.3", "121.2", "Driving")])
    s = parse_mr_csv(p).series["X"][0]
    assert s.timestamp == 1524474000
    assert s.mode_label is Mode.DRIVING
    assert s.position_label == (31.3, 121.2)


def test_parse_clips_rssi(tmp_path):
    p = tmp_path / "mr.csv"
    write_rows(p, [row(1, "X", [(1, 1, -10), (1, 2, -150)])])
    rs = parse_mr_csv(p).series["X"][0].stations
    assert rs[0].rssi == -30.0 and rs[1].rssi == -120.0


def test_csv_round_trip(tmp_path, tiny_dataset):
    samples = tiny_dataset.samples()[:50]
    p = tmp_path / "mr.csv"
    write_mr_csv(p, samples)
    reg = tiny_dataset.world.registry()
    back = parse_mr_csv(p, registry=reg).all_samples()
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert a.timestamp == b.timestamp and a.mode_label == b.mode_label
        assert [r.station_id for r in a.stations] == [r.station_id for r in b.stations]
        assert np.allclose([r.rssi for r in a.stations], [r.rssi for r in b.stations], atol=0.005)


# --- segmentation ---------------------------------------------------------------


def test_segment_no_merge():
    seqs = segment_sequences(serving_series([A, A, B, B, A]), tau=1)
    assert [len(s) for s in seqs] == [2, 2, 1]


def test_segment_trailing_singleton_merges_backward():
    seqs = segment_sequences(serving_series([A, A, B, B, A]), tau=2)
    assert [len(s) for s in seqs] == [2, 3]


def test_segment_single_sample_any_tau():
    seqs = segment_sequences(serving_series([A]), tau=5)
    assert [len(s) for s in seqs] == [1]


def test_segment_serving_id_from_longest_run():
    seqs = segment_sequences(serving_series([A, B, B, B]), tau=4)
    assert len(seqs) == 1 and seqs[0].serving_id == B


def test_segment_matches_oracle_exhaustively():
    for ids in oracles.all_series(8, (A, B, C)):
        for tau in (1, 2, 3, 5):
            got = [len(s) for s in segment_sequences(serving_series(ids), tau)]
            assert got == oracles.brute_segment_lengths(ids, tau), (ids, tau)


@given(st.lists(st.integers(1, 30), min_size=1, max_size=40), st.integers(1, 12))
def test_merge_matches_oracle(lengths, tau):
    assert merge_short_runs(lengths, tau) == oracles.brute_merge(lengths, tau)


@given(st.lists(st.sampled_from([A, B, C]), min_size=1, max_size=200), st.integers(1, 10))
def test_segment_partition_properties(ids, tau):
    series = serving_series(ids)
    seqs = segment_sequences(series, tau)
    flat = [s for q in seqs for s in q.samples]
    assert flat == series
    if len(seqs) > 1:
        assert all(len(q) >= tau for q in seqs)
    for q in seqs:
        bounds = q.subsequence_bounds
        assert bounds[0][0] == 0 and bounds[-1][1] == len(q) - 1
        assert all(b[0] == a[1] + 1 for a, b in zip(bounds, bounds[1:]))


def test_split_examples():
    X, Y = (5, 5), (6, 6)
    assert split_subsequences(second_series([X, X, Y])) == [(0, 1), (2, 2)]
    assert split_subsequences(second_series([X, X, X])) == [(0, 2)]
    assert split_subsequences(second_series([X, ABSENT, ABSENT, X])) == [(0, 0), (1, 2), (3, 3)]


def test_split_matches_oracle_exhaustively():
    for ids in oracles.all_series(8, (A, B, ABSENT)):
        assert split_subsequences(second_series(ids)) == oracles.brute_runs(list(ids))


@given(st.lists(st.sampled_from([A, B, C, ABSENT]), min_size=1, max_size=200))
def test_split_bounds_are_maximal(ids):
    samples = second_series(ids)
    bounds = split_subsequences(samples)
    keys = [s.second_id for s in samples]
    for a, b in bounds:
        assert len(set(keys[a : b + 1])) == 1
        if a > 0:
            assert keys[a - 1] != keys[a]
        if b < len(keys) - 1:
            assert keys[b + 1] != keys[b]


def test_build_sequences_keeps_devices_apart():
    series = {"a": serving_series([A, A], "a"), "b": serving_series([A, A], "b")}
    seqs = build_sequences(series, tau=1)
    assert [q.imsi for q in seqs] == ["a", "b"]


# --- features -------------------------------------------------------------------


def stats_for(samples):
    return fit_norm_stats(samples)


def labeled(ids, t=0):
    return sample_with(ids, t=t, pos=(31.28 + 0.001 * t, 121.2 + 0.001 * t))


def test_featurize_full_and_partial(tiny_dataset):
    samples = tiny_dataset.samples()
    stats = stats_for(samples)
    full = next(s for s in samples if len(s.stations) == 7)
    X = featurize(full, stats)
    assert X.shape == (7, 7) and np.all(np.any(X != 0, axis=0))
    one = MRSample(0, "x", (full.stations[0],), None, None)
    X1 = featurize(one, stats)
    assert np.all(X1[:, 1:] == 0) and np.any(X1[:, 0] != 0)


def test_featurize_mean_maps_to_zero():
    samples = [labeled([A]), labeled([B], t=1)]
    stats = stats_for(samples)
    mean_reading = mrdata.StationReading(7, 7, stats.mean[0], stats.mean[1], stats.mean[2], stats.mean[3], stats.mean[4])
    X = featurize(MRSample(0, "x", (mean_reading,)), stats)
    assert np.allclose(X[list(mrdata.CONTINUOUS), 0], 0.0)


def test_featurize_unknown_station_is_absent():
    samples = [labeled([A]), labeled([B], t=1)]
    stats = stats_for(samples)
    unknown = mrdata.StationReading(3, 3, None, None, 10, 2, -80.0)
    X = featurize(MRSample(0, "x", (reading(1, 1), unknown)), stats)
    assert np.all(X[:, 1] == 0)


def test_featurize_deterministic(tiny_dataset):
    samples = tiny_dataset.samples()[:20]
    stats = stats_for(samples)
    for s in samples:
        assert np.array_equal(featurize(s, stats), featurize(s, stats))


def test_norm_stats_box_contains_labels_and_round_trips(tiny_dataset):
    samples = tiny_dataset.samples()
    stats = stats_for(samples)
    lat = np.array([s.position_label[0] for s in samples])
    lon = np.array([s.position_label[1] for s in samples])
    assert stats.lat_min < lat.min() and lat.max() < stats.lat_max
    assert stats.lon_min < lon.min() and lon.max() < stats.lon_max
    u, v = stats.to_unit(lat, lon)
    assert np.all((u > 0) & (u < 1) & (v > 0) & (v < 1))
    lat2, lon2 = stats.from_unit(u, v)
    assert np.allclose(lat2, lat, atol=1e-12) and np.allclose(lon2, lon, atol=1e-12)
    assert NormStats.from_dict(stats.to_dict()) == stats
    assert min(stats.std) > 0


# --- speed distributions ----------------------------------------------------------------


def test_speed_point_mass():
    d = distribution_from_speeds([1.0] * 50, Mode.WALKING, bin_width=0.5)
    assert d.probabilities[2] == 1.0
    assert d.lookup(1.2) == 1.0 and d.lookup(3.0) == 0.0


def test_speed_uniform_monte_carlo():
    speeds = np.random.default_rng(0).uniform(0, 10, 10_000)
    d = distribution_from_speeds(speeds, Mode.DRIVING, bin_width=1.0, n_bins=10)
    assert np.allclose(d.probabilities, 0.1, atol=0.02)


def test_speed_overflow_goes_to_last_bin():
    d = distribution_from_speeds([100.0, 200.0], Mode.DRIVING, bin_width=0.5, n_bins=60)
    assert d.probabilities[-1] == 1.0


def test_speed_needs_two_pairs():
    with pytest.raises(InsufficientData):
        distribution_from_speeds([1.0], Mode.WALKING)


@given(st.lists(st.floats(0, 40), min_size=2, max_size=100), st.floats(0, 100))
def test_speed_distribution_invariants(speeds, probe):
    d = distribution_from_speeds(speeds, Mode.CYCLING)
    assert abs(sum(d.probabilities) - 1.0) <= 1e-9
    assert 0.0 <= d.lookup(probe) <= 1.0
    value, _ = d.lookup_interp(probe)
    assert 0.0 <= value <= 1.0


def test_speed_distribution_serializes():
    d = distribution_from_speeds([1.0, 2.0, 3.0], Mode.CYCLING)
    assert mrdata.SpeedDistribution.from_dict(d.to_dict()) == d


def test_estimate_from_series_uses_true_speeds():
    pts = [MRSample(t * 2, "x", (reading(1, 1),), Mode.WALKING, (31.28 + t * 2 * 1.5 / 111_195.0, 121.2)) for t in range(10)]
    d = mrdata.estimate_speed_distribution([pts], Mode.WALKING)
    assert d.probabilities[3] == pytest.approx(1.0)  # 1.5 m/s in [1.5, 2.0)
    assert math.isclose(sum(d.probabilities), 1.0)
