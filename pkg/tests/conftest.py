from datetime import datetime

import pytest

from edcast.datagen import ScenarioConfig, generate_visits
from edcast.features import clean_visits, hourly_aggregate

TINY_START = datetime(2024, 1, 1)


@pytest.fixture(scope="session")
def tiny_hourly():
    """11 quiet days, enough history for small protocol tests."""
    cfg = ScenarioConfig(start=TINY_START, days=11, seed=97, base_rate=7.0,
                         los_median_minutes=100, daily_amplitude=0.6)
    cleaned, _ = clean_visits(generate_visits(cfg), seed=98)
    return hourly_aggregate(cleaned, start=cfg.start, end=cfg.end)
