import math
from datetime import datetime, timedelta

import numpy as np
import pytest

from edcast.features import (
    ARRIVAL_METHODS,
    CTAS_LEVELS,
    DISTANCE_BINS,
    FEATURE_NAMES,
    LANGUAGES,
    VisitRecord,
    build_design,
    clean_visits,
    distance_bin_for,
    gp_feature_view,
    haversine_km,
    hour_of_day,
    hourly_aggregate,
    minute_occupancy,
    read_visits,
    write_visits,
)


def visit(arrival, los=60.0, pid="p1", **kw):
    return VisitRecord(patient_id=pid, arrival_time=arrival,
                       los_a=los, los_b=los, **kw)


T0 = datetime(2024, 3, 4)


class TestCleaning:
    def test_distance_half_logged_km_bins_low(self):
        assert distance_bin_for(0.5) == "0-1"
        assert distance_bin_for(-0.7) == "0-1"  # under a kilometer
        assert distance_bin_for(3.999) == "3-4"
        assert distance_bin_for(25.0) == "10+"

    def test_distance_km_is_logged_before_binning(self):
        rec = visit(T0, distance_km=math.exp(0.5))
        out, _ = clean_visits([rec])
        assert out[0].distance_bin == "0-1"

    def test_haversine_against_law_of_cosines(self):
        # explicit coordinate fixture
        lat1, lon1 = 43.6575, -79.3872
        lat2, lon2 = 43.7615, -79.4111
        got = haversine_km(lat1, lon1, lat2, lon2)
        p1, p2 = math.radians(lat1), math.radians(lat2)
        cos_c = (math.sin(p1) * math.sin(p2)
                 + math.cos(p1) * math.cos(p2) * math.cos(math.radians(lon2 - lon1)))
        expected = 6371.0088 * math.acos(min(1.0, cos_c))
        assert got == pytest.approx(expected, rel=1e-9)
        assert 11.0 < got < 13.0

    def test_pulse_out_of_range_becomes_missing(self):
        out, _ = clean_visits([visit(T0, pulse=250.0)])
        assert out[0].pulse is None
        out, _ = clean_visits([visit(T0, pulse=219.0)])
        assert out[0].pulse == 219.0

    def test_respiration_range(self):
        out, _ = clean_visits([visit(T0, respiration=95.0)])
        assert out[0].respiration is None

    def test_zero_los_floors_to_one_minute(self):
        rec = VisitRecord("p1", T0, los_a=0.0, los_b=0.0)
        out, _ = clean_visits([rec])
        assert out[0].los_minutes == 1.0
        assert out[0].discharge_time == T0 + timedelta(minutes=1)

    def test_max_of_two_los_candidates(self):
        rec = VisitRecord("p1", T0, los_a=45.0, los_b=80.0)
        out, _ = clean_visits([rec])
        assert out[0].los_minutes == 80.0

    def test_drops_are_tallied(self):
        records = [
            VisitRecord("a", None, los_a=10.0),
            VisitRecord("b", T0, los_a=None, los_b=None),
            visit(T0, pid="c"),
        ]
        out, tally = clean_visits(records)
        assert len(out) == 1
        assert tally.n_dropped_no_arrival == 1
        assert tally.n_dropped_no_los == 1
        assert tally.n_input == 3 and tally.n_output == 1

    def test_blood_pressure_split(self):
        out, _ = clean_visits([visit(T0, blood_pressure="118/76")])
        assert out[0].systolic == 118.0 and out[0].diastolic == 76.0

    def test_arrival_method_mapping(self):
        cases = {"helicopter": "air", "EMS": "ambulance", "taxi": "car",
                 "stretcher": "transfer", "": "other", "walk": "walk"}
        for raw, want in cases.items():
            out, _ = clean_visits([visit(T0, arrival_method=raw)])
            assert out[0].arrival_method == want

    def test_unknown_sex_randomly_assigned_seeded(self):
        recs = [visit(T0, pid=f"p{i}", sex="unknown") for i in range(10)]
        out1, t1 = clean_visits(recs, seed=5)
        out2, _ = clean_visits(recs, seed=5)
        assert [r.sex for r in out1] == [r.sex for r in out2]
        assert all(r.sex in ("female", "male") for r in out1)
        assert t1.sexes_assigned == 10

    def test_ctas_missing_label(self):
        out, _ = clean_visits([visit(T0, ctas=""), visit(T0, ctas="3")])
        assert out[0].ctas == "missing" and out[1].ctas == "3"

    def test_return_flag_within_72h(self):
        first = visit(T0, pid="x", los=30.0)
        again = visit(T0 + timedelta(hours=50), pid="x")
        later = visit(T0 + timedelta(hours=200), pid="x")
        out, _ = clean_visits([first, again, later])
        assert [r.return_72h for r in out] == [False, True, False]

    def test_rare_language_consolidated(self):
        # lots of english, a single turkish record in >1000 rows (<0.1%)
        recs = [visit(T0, pid=f"p{i}", language="english") for i in range(1200)]
        recs.append(visit(T0, pid="rare", language="turkish"))
        out, tally = clean_visits(recs)
        assert out[-1].language == "other"
        assert tally.languages_consolidated == 1

    def test_cleaning_idempotent(self):
        from edcast.datagen import ScenarioConfig, generate_visits
        cfg = ScenarioConfig(start=T0, days=4, seed=11)
        raw = generate_visits(cfg)
        once, _ = clean_visits(raw, seed=3)
        twice, tally = clean_visits(once, seed=3)
        assert tally.sexes_assigned == 0
        assert twice == once


class TestHourlyCensus:
    def test_single_visit_spans_two_hours(self):
        v = visit(T0.replace(hour=10, minute=30), los=45.0)
        hourly = hourly_aggregate(clean_visits([v])[0], start=T0, end=T0 + timedelta(hours=24))
        census = hourly["census_max"]
        assert census.iloc[10] == 1.0 and census.iloc[11] == 1.0
        assert census.drop(census.index[[10, 11]]).eq(0).all()

    def test_one_minute_overlap_counts_two(self):
        a = visit(T0.replace(hour=14, minute=0), los=38.0, pid="a")
        b = visit(T0.replace(hour=14, minute=37), los=10.0, pid="b")
        hourly = hourly_aggregate(clean_visits([a, b])[0], start=T0, end=T0 + timedelta(hours=24))
        assert hourly["census_max"].iloc[14] == 2.0

    def brute_force_census(self, visits, start, n_hours):
        out = np.zeros(n_hours)
        var = np.zeros(n_hours)
        for h in range(n_hours):
            per_minute = []
            for m in range(60):
                ts = start + timedelta(hours=h, minutes=m)
                count = 0
                for v in visits:
                    arr = v.arrival_time.replace(second=0, microsecond=0)
                    dis = v.discharge_time
                    dis_floor = dis.replace(second=0, microsecond=0)
                    if arr <= ts < dis_floor:
                        count += 1
                per_minute.append(count)
            out[h] = max(per_minute)
            var[h] = np.var(per_minute)
        return out, var

    @pytest.mark.parametrize("seed", range(3))
    def test_random_fixture_matches_minute_oracle(self, seed):
        rng = np.random.default_rng(400 + seed)
        visits = []
        for i in range(200):
            arr = T0 + timedelta(minutes=int(rng.integers(0, 48 * 60)))
            visits.append(visit(arr, los=float(rng.integers(1, 600)), pid=f"p{i}"))
        clean, _ = clean_visits(visits)
        n_hours = 60
        hourly = hourly_aggregate(clean, start=T0, end=T0 + timedelta(hours=n_hours))
        oracle_max, oracle_var = self.brute_force_census(clean, T0, n_hours)
        assert np.array_equal(hourly["census_max"].values, oracle_max)
        assert np.allclose(hourly["census_var"].values, oracle_var, atol=1e-12)

    def test_share_families_sum_to_one_or_zero(self):
        from edcast.datagen import ScenarioConfig, generate_visits
        cfg = ScenarioConfig(start=T0, days=3, seed=21)
        clean, _ = clean_visits(generate_visits(cfg))
        hourly = hourly_aggregate(clean, start=T0, end=T0 + timedelta(days=3))
        for side in ("arr", "dis"):
            for vocab, prefix in ((LANGUAGES, "lang"), (CTAS_LEVELS, "ctas"),
                                  (DISTANCE_BINS, "dist")):
                cols = [f"{side}_share_{prefix}_{v}" for v in vocab]
                sums = hourly[cols].sum(axis=1).values
                assert np.all((np.abs(sums - 1.0) < 1e-9) | (sums == 0.0))

    def test_empty_hours_are_valid(self):
        v = visit(T0.replace(hour=5), los=30.0)
        hourly = hourly_aggregate(clean_visits([v])[0], start=T0, end=T0 + timedelta(hours=12))
        assert len(hourly) == 12
        assert hourly["n_arrivals"].sum() == 1.0

    def test_census_carries_forward_through_quiet_hours(self):
        v = visit(T0.replace(hour=2, minute=0), los=5 * 60.0)  # present 02:00-07:00
        hourly = hourly_aggregate(clean_visits([v])[0], start=T0, end=T0 + timedelta(hours=10))
        assert hourly["census_max"].iloc[4] == 1.0  # no arrivals/discharges then


class TestDesign:
    def _hourly(self, days=8, seed=31):
        from edcast.datagen import ScenarioConfig, generate_visits
        cfg = ScenarioConfig(start=T0, days=days, seed=seed)
        clean, _ = clean_visits(generate_visits(cfg))
        return hourly_aggregate(clean, start=T0, end=T0 + timedelta(days=days))

    def test_163_base_features(self):
        assert len(FEATURE_NAMES) == 163

    def test_lag_columns_shift_raw_values(self):
        hourly = self._hourly()
        design = build_design(hourly, (hourly.index[10], hourly.index[-1]))
        names = list(design.column_names)
        for feat in ("census_max", "n_arrivals"):
            lag0 = names.index(f"{feat}__lag0")
            for lag in (1, 3, 10):
                c = names.index(f"{feat}__lag{lag}")
                assert np.array_equal(design.raw[lag:, c], design.raw[:-lag, lag0])
        # lag-0 equals the raw hourly series
        lag0 = names.index("census_max__lag0")
        assert np.array_equal(design.raw[:, lag0],
                              hourly["census_max"].values[10:])

    def test_constant_column_normalizes_to_zero(self):
        hourly = self._hourly()
        hourly["census_max"] = 30.0
        design = build_design(hourly, (hourly.index[10], hourly.index[-1]))
        c = design.column_names.index("census_max__lag0")
        assert np.all(design.values[:, c] == 0.0)
        assert design.normalizer.degenerate[c]

    def test_normalizer_recomputation_on_training_block(self):
        hourly = self._hourly()
        span = (hourly.index[10], hourly.index[100])
        design = build_design(hourly, span)
        block = design.values[design.training_mask]
        assert np.max(np.abs(block.mean(axis=0))) < 1e-10
        stds = block.std(axis=0)
        assert np.all((np.abs(stds - 1.0) < 1e-9) | (stds == 0.0))

    def test_no_leakage_stats_from_training_rows_only(self):
        hourly = self._hourly()
        span = (hourly.index[10], hourly.index[80])
        design = build_design(hourly, span)
        mask = design.training_mask
        expected_mean = design.raw[mask].mean(axis=0)
        assert np.allclose(design.normalizer.mean, expected_mean, rtol=0, atol=1e-12)
        # perturbing rows after the span leaves the normalizer unchanged
        hourly2 = hourly.copy()
        hourly2.iloc[120:, 1:] = hourly2.iloc[120:, 1:] + 100.0
        design2 = build_design(hourly2, span)
        assert np.array_equal(np.asarray(design.normalizer.mean),
                              np.asarray(design2.normalizer.mean))

    def test_lag_warmup_rows_excluded(self):
        hourly = self._hourly(days=2)
        design = build_design(hourly, (hourly.index[10], hourly.index[-1]))
        assert design.n_rows == len(hourly) - 10
        assert design.hours[0] == hourly.index[10]


class TestGPView:
    def _design(self):
        from edcast.datagen import ScenarioConfig, generate_visits
        cfg = ScenarioConfig(start=T0, days=4, seed=41)
        clean, _ = clean_visits(generate_visits(cfg))
        hourly = hourly_aggregate(clean, start=T0, end=T0 + timedelta(days=4))
        return build_design(hourly, (hourly.index[10], hourly.index[-1]))

    def test_hour_of_day_clock_read(self):
        design = self._design()
        hod = hour_of_day(design.hours)
        pos = np.flatnonzero(design.hours.hour == 13)[0]
        assert hod[pos] == 13.0
        view = gp_feature_view(design)
        assert view.X[pos, 4] == pytest.approx(np.sin(2 * np.pi * 13 / 24))
        assert view.X[pos, 5] == pytest.approx(np.cos(2 * np.pi * 13 / 24))

    def test_groups_disjoint_and_cover_view(self):
        view = gp_feature_view(self._design())
        seen = set()
        for g in view.layout.groups:
            assert not (set(g.columns) & seen)
            seen |= set(g.columns)
        assert seen == set(range(view.X.shape[1]))
        assert len(view.layout.groups) == 6

    def test_time_index_counts_window_hours(self):
        view = gp_feature_view(self._design())
        assert np.array_equal(view.t[:5], np.arange(5.0))
        shifted = gp_feature_view(self._design(),
                                  window_start=self._design().hours[7])
        assert shifted.t[7] == 0.0

    def test_missing_group_column_is_structural_error(self):
        design = self._design()
        names = tuple(n for n in design.column_names if n != "census_max__lag0")
        import dataclasses
        broken = dataclasses.replace(
            design,
            column_names=names,
            raw=design.raw[:, [i for i, n in enumerate(design.column_names)
                               if n != "census_max__lag0"]])
        with pytest.raises(ValueError, match="missing GP view column"):
            gp_feature_view(broken)


class TestVisitIO:
    def test_round_trip(self, tmp_path):
        from edcast.datagen import ScenarioConfig, generate_visits
        cfg = ScenarioConfig(start=T0, days=2, seed=51)
        raw = generate_visits(cfg)
        path = tmp_path / "visits.csv"
        write_visits(path, raw)
        back = read_visits(path)
        assert back == raw

    def test_missing_columns_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("patient_id,arrival_time\np1,2024-01-01T00:00\n")
        with pytest.raises(ValueError, match="missing columns"):
            read_visits(path)
