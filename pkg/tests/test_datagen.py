from datetime import datetime, timedelta

import numpy as np
import pytest

from edcast.datagen import (
    ScenarioConfig,
    ShiftConfig,
    apply_shift,
    generate_visits,
    hourly_rate,
    scenario_from_dict,
    scenario_to_dict,
)
from edcast.features import (
    ARRIVAL_METHODS,
    CTAS_LEVELS,
    DISTANCE_BINS,
    clean_visits,
    hourly_aggregate,
    write_visits,
)

T0 = datetime(2024, 1, 1)


class TestGeneration:
    def test_zero_rate_multiplier_yields_no_visits(self):
        cfg = ScenarioConfig(start=T0, days=5, seed=1,
                             shift=ShiftConfig(day=1, rate_multiplier=0.0))
        assert generate_visits(cfg) == []

    def test_empty_span(self):
        assert generate_visits(ScenarioConfig(start=T0, days=0, seed=1)) == []

    def test_mean_arrivals_match_configured_intensity(self):
        cfg = ScenarioConfig(start=T0, days=90, seed=2)
        visits = generate_visits(cfg)
        # cosine seasonality integrates to 1 over whole days/weeks
        expected = cfg.base_rate * cfg.days * 24
        assert abs(len(visits) - expected) / expected < 0.05

    def test_same_seed_is_byte_identical(self, tmp_path):
        cfg = ScenarioConfig(start=T0, days=7, seed=3)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_visits(a, generate_visits(cfg))
        write_visits(b, generate_visits(cfg))
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_differs(self):
        v1 = generate_visits(ScenarioConfig(start=T0, days=3, seed=4))
        v2 = generate_visits(ScenarioConfig(start=T0, days=3, seed=5))
        assert v1 != v2

    def test_vocabularies(self):
        visits = generate_visits(ScenarioConfig(start=T0, days=5, seed=6))
        methods = {v.arrival_method for v in visits}
        assert methods <= set(ARRIVAL_METHODS)
        assert {v.ctas for v in visits} <= set(CTAS_LEVELS[:5]) | {""}
        assert {v.distance_bin for v in visits} <= set(DISTANCE_BINS)


class TestShift:
    def test_no_shift_constant_params(self):
        cfg = ScenarioConfig(start=T0, days=10, seed=7)
        early = apply_shift(cfg, T0)
        late = apply_shift(cfg, T0 + timedelta(days=9))
        assert early.rate_multiplier == late.rate_multiplier == 1.0
        assert early.method_probs == late.method_probs

    def test_boundary_closed_left(self):
        cfg = ScenarioConfig(start=T0, days=10, seed=7,
                             shift=ShiftConfig(day=4, rate_multiplier=0.5))
        boundary = T0 + timedelta(days=3)
        assert apply_shift(cfg, boundary - timedelta(minutes=1)).rate_multiplier == 1.0
        assert apply_shift(cfg, boundary).rate_multiplier == 0.5

    def test_halved_rate_in_monte_carlo(self):
        cfg = ScenarioConfig(start=T0, days=60, seed=8,
                             shift=ShiftConfig(day=31, rate_multiplier=0.5))
        visits = generate_visits(cfg)
        boundary = T0 + timedelta(days=30)
        pre = sum(1 for v in visits if v.arrival_time and v.arrival_time < boundary)
        post = sum(1 for v in visits if v.arrival_time and v.arrival_time >= boundary)
        assert abs(post / pre - 0.5) < 0.10 * 0.5 + 0.05

    def test_mix_perturbation(self):
        shifted_mix = {"walk": 0.2, "car": 0.2, "ambulance": 0.4, "transfer": 0.1,
                       "police": 0.04, "air": 0.03, "other": 0.03}
        cfg = ScenarioConfig(start=T0, days=20, seed=9,
                             shift=ShiftConfig(day=11, rate_multiplier=1.0,
                                               method_probs=shifted_mix))
        visits = generate_visits(cfg)
        boundary = T0 + timedelta(days=10)
        post = [v for v in visits if v.arrival_time and v.arrival_time >= boundary]
        amb_share = np.mean([v.arrival_method == "ambulance" for v in post])
        assert amb_share > 0.3


class TestCensusShape:
    def test_daily_autocorrelation_peak(self):
        cfg = ScenarioConfig(start=T0, days=21, seed=10)
        clean, _ = clean_visits(generate_visits(cfg))
        hourly = hourly_aggregate(clean, start=T0, end=cfg.end)
        x = hourly["census_max"].values
        x = x - x.mean()
        acf = np.correlate(x, x, "full")[len(x) - 1:] / (x @ x)
        assert acf[24] > acf[17]

    def test_census_spans_all_escalation_tiers(self):
        cfg = ScenarioConfig(start=T0, days=30, seed=11)
        clean, _ = clean_visits(generate_visits(cfg))
        hourly = hourly_aggregate(clean, start=T0, end=cfg.end)
        census = hourly["census_max"].values
        tiers = np.select([census <= 30, census <= 37, census <= 47],
                          [0, 1, 2], 3)
        counts = np.bincount(tiers, minlength=4)
        assert np.all(counts > 0), counts


class TestScenarioIO:
    def test_round_trip(self):
        cfg = ScenarioConfig(start=T0, days=14, seed=12,
                             shift=ShiftConfig(day=8, rate_multiplier=0.4))
        d = scenario_to_dict(cfg)
        back = scenario_from_dict(d)
        assert back == cfg

    def test_field_level_errors(self):
        with pytest.raises(ValueError, match="missing required field 'days'"):
            scenario_from_dict({"start": "2024-01-01"})
        with pytest.raises(ValueError, match="'start' is not an ISO timestamp"):
            scenario_from_dict({"start": "yesterday", "days": 3})
        with pytest.raises(ValueError, match="must be int"):
            scenario_from_dict({"start": "2024-01-01", "days": "three"})
        with pytest.raises(ValueError, match="unknown fields"):
            scenario_from_dict({"start": "2024-01-01", "days": 3, "spam": 1})

    def test_validation(self):
        with pytest.raises(ValueError, match="amplitudes"):
            ScenarioConfig(start=T0, days=3, daily_amplitude=1.5)
        with pytest.raises(ValueError, match="outside the scenario"):
            ScenarioConfig(start=T0, days=3, shift=ShiftConfig(day=9))
        with pytest.raises(ValueError, match="sum to 1"):
            ScenarioConfig(start=T0, days=3, sex_probs={"female": 0.9})

    def test_rate_curve_positive(self):
        cfg = ScenarioConfig(start=T0, days=7, seed=13)
        for h in range(0, 7 * 24, 5):
            assert hourly_rate(cfg, T0 + timedelta(hours=h)) > 0
