import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prnetplus import simgen
from prnetplus.mrdata import ABSENT, MRSample, StationReading

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY_SIM = simgen.SimConfig(width_km=0.5, height_km=0.5, station_density=40.0, exact_count=True, n_trajectories=12,
                            legs_per_trajectory=2, leg_duration_s=60.0)


@pytest.fixture(scope="session")
def tiny_dataset():
    return simgen.generate_dataset(TINY_SIM, 3)


def reading(rnc, cell, rssi=-70.0, lat=31.28, lon=121.2):
    return StationReading(rnc, cell, lat, lon, 20, 3, rssi)


def sample_with(ids, t=0, imsi="x", mode=None, pos=None):
    """Sample whose readings carry the given (rncid, cellid) ids, strongest first."""
    rs = tuple(reading(r, c, -50.0 - 5 * k) for k, (r, c) in enumerate(ids))
    return MRSample(t, imsi, rs, mode, pos)


def serving_series(ids, imsi="x"):
    """One sample per id with that id serving and a fixed second station."""
    return [sample_with([sid, (9, 9)], t=i, imsi=imsi) for i, sid in enumerate(ids)]


def second_series(ids, serving=(1, 1)):
    """One sample per id with that id as the second station; ABSENT leaves the serving station alone."""
    return [sample_with([serving] if sid == ABSENT else [serving, sid], t=i) for i, sid in enumerate(ids)]


VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
