import math

import numpy as np
import pandas as pd
import pytest
from scipy.stats import binom

from edcast.metrics import (
    DEFAULT_POLICY,
    EscalationPolicy,
    clopper_pearson,
    concordance,
    daily_concordance,
    daily_r2,
    daily_rmse,
    escalation_level,
    forecast_census,
    label_counts,
    level_change,
    pr_by_class,
    pr_curve,
    r_squared,
    rmse,
    round_half_up,
)


class TestEscalation:
    @pytest.mark.parametrize("census,level", [
        (30, 0), (31, 1), (37, 1), (38, 2), (47, 2), (48, 3), (0, 0), (200, 3),
    ])
    def test_tier_boundaries(self, census, level):
        assert escalation_level(census) == level

    def test_rounding_half_up(self):
        assert round_half_up(36.6) == 37
        assert escalation_level(36.6) == 1
        assert round_half_up(30.5) == 31
        assert escalation_level(30.5) == 1
        assert escalation_level(30.49) == 0

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            escalation_level(-1.0)

    def test_exhaustive_monotone_0_to_200(self):
        levels = [escalation_level(c) for c in range(201)]
        assert levels == sorted(levels)
        assert set(levels) == {0, 1, 2, 3}

    def test_level_change_worked_example(self):
        # census 32 now (level 1), forecast 49 (level 3): positive change of 2
        assert level_change(32, 49) == 2

    def test_level_change_identity_and_negative(self):
        assert level_change(33, 33) == 0
        assert level_change(48, 20) == -3

    def test_policy_validation(self):
        with pytest.raises(ValueError, match="increasing"):
            EscalationPolicy(normal_max=40, level1_max=37, level2_max=47)


class TestPointMetrics:
    def test_r2_perfect_and_null(self):
        a = np.array([30.0, 35.0, 40.0, 32.0])
        assert r_squared(a, a) == 1.0
        assert r_squared(a, np.full(4, a.mean())) == 0.0

    def test_r2_spreadsheet_oracle_24_points(self):
        rng = np.random.default_rng(60)
        actual = rng.uniform(20, 50, size=24)
        forecast = actual + rng.normal(0, 3, size=24)
        # plain-sum oracle
        mean_a = sum(actual) / 24
        ss_tot = sum((x - mean_a) ** 2 for x in actual)
        ss_res = sum((x - y) ** 2 for x, y in zip(actual, forecast))
        assert r_squared(actual, forecast) == pytest.approx(1 - ss_res / ss_tot,
                                                            rel=1e-12)

    def test_r2_zero_variance_absent(self):
        assert r_squared(np.full(5, 30.0), np.arange(5.0)) is None

    def test_rmse(self):
        assert rmse(np.array([1.0, 2.0]), np.array([2.0, 4.0])) == pytest.approx(
            math.sqrt((1 + 4) / 2))

    def test_concordance_monotone_and_reversed(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        assert concordance(a, a * 2 + 1) == 1.0
        assert concordance(a, -a) == 0.0

    def test_concordance_with_ties_vs_bruteforce(self):
        rng = np.random.default_rng(61)
        actual = rng.integers(20, 26, size=10).astype(float)
        forecast = np.round(rng.uniform(20, 26, size=10) * 2) / 2
        forecast[3] = forecast[7]  # force a forecast tie

        num = den = 0.0
        for i in range(10):
            for j in range(i + 1, 10):
                if actual[i] == actual[j]:
                    continue
                den += 1
                prod = (forecast[i] - forecast[j]) * (actual[i] - actual[j])
                if prod > 0:
                    num += 1
                elif forecast[i] == forecast[j]:
                    num += 0.5
        assert concordance(actual, forecast) == pytest.approx(num / den, rel=1e-12)

    def test_concordance_all_tied_absent(self):
        assert concordance(np.full(6, 30.0), np.arange(6.0)) is None


def cp_bisection_oracle(k, n, alpha=0.05):
    """Invert the binomial CDF by bisection."""
    def solve(fn, lo, hi):
        for _ in range(200):
            mid = (lo + hi) / 2
            if fn(mid):
                lo = mid
            else:
                hi = mid
        return (lo + hi) / 2

    lower = 0.0 if k == 0 else solve(lambda p: binom.sf(k - 1, n, p) < alpha / 2,
                                     0.0, 1.0)
    upper = 1.0 if k == n else solve(lambda p: binom.cdf(k, n, p) > alpha / 2,
                                     0.0, 1.0)
    return lower, upper


class TestClopperPearson:
    def test_five_of_ten(self):
        lo, hi = clopper_pearson(5, 10)
        assert lo == pytest.approx(0.187, abs=5e-4)
        assert hi == pytest.approx(0.813, abs=5e-4)

    @pytest.mark.parametrize("k,n", [(0, 7), (7, 7), (5, 10), (1, 30), (29, 30)])
    def test_matches_cdf_inversion_oracle(self, k, n):
        lo, hi = clopper_pearson(k, n)
        olo, ohi = cp_bisection_oracle(k, n)
        assert lo == pytest.approx(olo, abs=1e-9)
        assert hi == pytest.approx(ohi, abs=1e-9)

    def test_bounds_bracket_point(self):
        for k, n in [(3, 12), (0, 4), (4, 4)]:
            lo, hi = clopper_pearson(k, n)
            assert lo <= k / n <= hi

    def test_invalid(self):
        with pytest.raises(ValueError):
            clopper_pearson(5, 4)
        with pytest.raises(ValueError):
            clopper_pearson(0, 0)


def make_records(rows, lead=6, model="gpr"):
    frame = []
    for current, actual, mean in rows:
        frame.append({"issue_time": None, "eval_day": 1, "lead": lead,
                      "model": model, "mean": float(mean), "variance": 4.0,
                      "target_time": None, "target_day": 1,
                      "actual": float(actual), "current": float(current)})
    return pd.DataFrame(frame)


class TestPRByClass:
    def test_hand_confusion_matrix(self):
        # 4 predicted +1 of which 3 true; 5 actual +1
        rows = (
            [(25, 33, 33)] * 3      # predicted +1, actual +1 (TP)
            + [(25, 25, 33)]        # predicted +1, actual 0  (FP)
            + [(25, 33, 25)] * 2    # predicted 0, actual +1  (FN)
            + [(25, 25, 25)] * 4    # quiet hours
        )
        out = {c.delta_class: c for c in pr_by_class(make_records(rows), 6)}
        assert out["+1"].precision == pytest.approx(0.75)
        assert out["+1"].recall == pytest.approx(0.6)
        assert out["any"].precision == pytest.approx(0.75)
        assert out["any"].recall == pytest.approx(0.6)
        assert out["+1"].n_predicted == 4 and out["+1"].n_actual == 5

    def test_all_quiet_gives_absent_metrics(self):
        rows = [(25, 25, 25)] * 8
        for c in pr_by_class(make_records(rows), 6):
            assert c.precision is None and c.recall is None
            assert c.n_predicted == 0 and c.n_actual == 0
            assert c.precision_ci is None

    def test_ci_attached(self):
        rows = [(25, 33, 33)] * 3 + [(25, 25, 33)]
        out = {c.delta_class: c for c in pr_by_class(make_records(rows), 6)}
        lo, hi = out["+1"].precision_ci
        elo, ehi = clopper_pearson(3, 4)
        assert (lo, hi) == (elo, ehi)

    def test_negative_changes_excluded_from_positive_classes(self):
        rows = [(48, 20, 20)] * 3 + [(25, 33, 33)]
        out = {c.delta_class: c for c in pr_by_class(make_records(rows), 6)}
        assert out["any"].tp == 1
        assert out["any"].n_predicted == 1 and out["any"].n_actual == 1


class TestPRCurve:
    def _records(self, seed=62, n=200):
        rng = np.random.default_rng(seed)
        current = rng.integers(22, 40, size=n).astype(float)
        actual = np.maximum(current + rng.normal(2, 6, size=n), 0.0)
        mean = np.maximum(actual + rng.normal(0, 4, size=n), 0.0)
        df = make_records(list(zip(current, actual, mean)))
        df["variance"] = rng.uniform(4, 25, size=n)
        return df

    def test_median_percentile_matches_mean_classification(self):
        records = self._records()
        curve = pr_curve(records, 6, [0.5])
        base = {c.delta_class: c for c in pr_by_class(records, 6)}["any"]
        assert curve["precision"].iloc[0] == base.precision
        assert curve["recall"].iloc[0] == base.recall

    def test_degenerate_variance_gives_identical_points(self):
        records = self._records()
        records["variance"] = 0.0
        curve = pr_curve(records, 6, [0.1, 0.3, 0.5, 0.7, 0.9])
        assert curve["precision"].nunique() == 1
        assert curve["recall"].nunique() == 1

    def test_staircase_matches_per_point_recompute(self):
        records = self._records()
        grid = [0.1, 0.25, 0.5, 0.75, 0.9]
        curve = pr_curve(records, 6, grid)
        for q, row in zip(grid, curve.itertuples()):
            pr = {c.delta_class: c for c in pr_by_class(records, 6, "gpr", q)}["any"]
            assert row.precision == pr.precision
            assert row.recall == pr.recall

    def test_grid_validation(self):
        with pytest.raises(ValueError, match="inside"):
            pr_curve(self._records(), 6, [0.0, 0.5])

    def test_percentile_needs_variance(self):
        records = self._records()
        records["variance"] = np.nan
        with pytest.raises(ValueError, match="variance"):
            forecast_census(records, 0.3)


class TestLabelCounts:
    def test_constant_census_all_zero(self):
        rows = [(30, 30, 30)] * 10
        counts = label_counts(make_records(rows))
        assert (counts["count"] == 0).all()

    def test_partition_identity(self):
        rng = np.random.default_rng(63)
        rows = [(int(c), int(a), 30) for c, a in
                zip(rng.integers(20, 55, 60), rng.integers(20, 55, 60))]
        records = make_records(rows)
        counts = label_counts(records)
        by_class = counts.set_index("delta_class")["count"]
        assert by_class["any"] == by_class["+1"] + by_class["+2"] + by_class["+3"]
        # brute recount of any-positive
        expected = sum(1 for c, a, _ in rows
                       if escalation_level(a) > escalation_level(c))
        assert by_class["any"] == expected
