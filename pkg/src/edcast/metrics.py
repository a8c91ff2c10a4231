"""Evaluation: escalation tiers, daily fit metrics, and level-change
precision/recall with exact binomial confidence intervals.

Forecast records are a tidy table with one row per (issue hour, lead,
model); metric wrappers slice it by target day, lead, and model family.
Classification metrics compare the escalation level implied by a forecast
against the level actually reached, both relative to the level observed at
the issue hour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtri
from scipy.stats import beta as beta_dist

POSITIVE_CLASSES = ("+1", "+2", "+3", "any")


@dataclass(frozen=True)
class EscalationPolicy:
    """Census tiers: normal <= 30, level 1 31-37, level 2 38-47, level 3 48+."""

    normal_max: int = 30
    level1_max: int = 37
    level2_max: int = 47

    def __post_init__(self):
        if not (0 <= self.normal_max < self.level1_max < self.level2_max):
            raise ValueError("escalation thresholds must be increasing")


DEFAULT_POLICY = EscalationPolicy()


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def escalation_level(census, policy: EscalationPolicy = DEFAULT_POLICY) -> int:
    """Tier for a census value; real-valued forecasts round half-up first."""
    c = round_half_up(float(census))
    if c < 0:
        raise ValueError(f"census must be non-negative, got {census}")
    if c <= policy.normal_max:
        return 0
    if c <= policy.level1_max:
        return 1
    if c <= policy.level2_max:
        return 2
    return 3


def level_change(current_census, forecast_census,
                 policy: EscalationPolicy = DEFAULT_POLICY) -> int:
    """Forecast tier minus current tier; negative changes are reported as-is
    but excluded from the positive-change classes."""
    return escalation_level(forecast_census, policy) - escalation_level(current_census, policy)


# ---------------------------------------------------------------------------
# point-forecast metrics
# ---------------------------------------------------------------------------


def r_squared(actual: np.ndarray, forecast: np.ndarray) -> float | None:
    """1 - SS_res/SS_tot; None when the actuals carry no variance."""
    a = np.asarray(actual, dtype=float)
    f = np.asarray(forecast, dtype=float)
    if len(a) < 2 or np.all(a == a[0]):
        return None
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    ss_res = float(np.sum((a - f) ** 2))
    return 1.0 - ss_res / ss_tot


def rmse(actual: np.ndarray, forecast: np.ndarray) -> float:
    a = np.asarray(actual, dtype=float)
    f = np.asarray(forecast, dtype=float)
    return float(np.sqrt(np.mean((a - f) ** 2)))


def concordance(actual: np.ndarray, forecast: np.ndarray) -> float | None:
    """Pairwise ordering agreement over pairs with distinct actuals;
    forecast ties count one half.  None when every actual is tied."""
    a = np.asarray(actual, dtype=float)
    f = np.asarray(forecast, dtype=float)
    da = a[:, None] - a[None, :]
    df = f[:, None] - f[None, :]
    valid = np.triu(da != 0.0, k=1)
    n_pairs = int(valid.sum())
    if n_pairs == 0:
        return None
    agree = (np.sign(df) == np.sign(da)) & valid
    ties = (df == 0.0) & valid
    return float((agree.sum() + 0.5 * ties.sum()) / n_pairs)


def clopper_pearson(k: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Exact binomial CI by beta-quantile inversion of the binomial CDF."""
    if not (0 <= k <= n):
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if n == 0:
        raise ValueError("interval undefined for n = 0")
    lo = 0.0 if k == 0 else float(beta_dist.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(beta_dist.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


# ---------------------------------------------------------------------------
# record-table wrappers
# ---------------------------------------------------------------------------

RECORD_COLUMNS = ("issue_time", "eval_day", "lead", "model", "mean",
                  "variance", "target_time", "target_day", "actual", "current")


def _slice_day(records: pd.DataFrame, day: int, lead: int, model: str) -> pd.DataFrame:
    rows = records[(records["target_day"] == day) & (records["lead"] == lead)
                   & (records["model"] == model)]
    return rows.dropna(subset=["actual"])


def daily_r2(records: pd.DataFrame, day: int, lead: int, model: str) -> float | None:
    rows = _slice_day(records, day, lead, model)
    if len(rows) < 2:
        return None
    return r_squared(rows["actual"].to_numpy(), rows["mean"].to_numpy())


def daily_rmse(records: pd.DataFrame, day: int, lead: int, model: str) -> float | None:
    rows = _slice_day(records, day, lead, model)
    if len(rows) == 0:
        return None
    return rmse(rows["actual"].to_numpy(), rows["mean"].to_numpy())


def daily_concordance(records: pd.DataFrame, day: int, lead: int, model: str) -> float | None:
    rows = _slice_day(records, day, lead, model)
    if len(rows) < 2:
        return None
    return concordance(rows["actual"].to_numpy(), rows["mean"].to_numpy())


def forecast_census(rows: pd.DataFrame, percentile: float | None) -> np.ndarray:
    """Point forecast per record: the mean, or a Gaussian percentile of the
    predictive distribution when one is requested (GPR records only).

    Negative values clip to zero before tier classification.
    """
    mean = rows["mean"].to_numpy(dtype=float)
    if percentile is None:
        return np.maximum(mean, 0.0)
    if not (0.0 < percentile < 1.0):
        raise ValueError(f"percentile must be in (0, 1), got {percentile}")
    var = rows["variance"].to_numpy(dtype=float)
    if np.any(~np.isfinite(var)):
        raise ValueError("percentile forecasts need predictive variance")
    return np.maximum(mean + float(ndtri(percentile)) * np.sqrt(var), 0.0)


@dataclass(frozen=True)
class ClassPR:
    delta_class: str
    tp: int
    n_predicted: int
    n_actual: int
    precision: float | None
    recall: float | None
    precision_ci: tuple[float, float] | None
    recall_ci: tuple[float, float] | None


def _deltas(rows: pd.DataFrame, percentile: float | None,
            policy: EscalationPolicy) -> tuple[np.ndarray, np.ndarray]:
    current = rows["current"].to_numpy(dtype=float)
    actual = rows["actual"].to_numpy(dtype=float)
    fc = forecast_census(rows, percentile)
    cur_level = np.array([escalation_level(c, policy) for c in current])
    act_level = np.array([escalation_level(a, policy) for a in actual])
    fc_level = np.array([escalation_level(f, policy) for f in fc])
    return fc_level - cur_level, act_level - cur_level


def pr_by_class(records: pd.DataFrame, lead: int, model: str = "gpr",
                percentile: float | None = None,
                policy: EscalationPolicy = DEFAULT_POLICY,
                alpha: float = 0.05) -> list[ClassPR]:
    """Precision/recall per positive level-change class with exact CIs.

    Classes are exact changes of +1, +2, +3 and the pooled "any" positive
    change; zero denominators yield absent metrics with supports reported.
    """
    rows = records[(records["lead"] == lead) & (records["model"] == model)]
    rows = rows.dropna(subset=["actual"])
    pred_delta, act_delta = _deltas(rows, percentile, policy)
    out = []
    for cls in POSITIVE_CLASSES:
        if cls == "any":
            pred_pos = pred_delta > 0
            act_pos = act_delta > 0
            tp = int(np.sum(pred_pos & act_pos))
        else:
            d = int(cls)
            pred_pos = pred_delta == d
            act_pos = act_delta == d
            tp = int(np.sum(pred_pos & act_pos))
        n_pred = int(pred_pos.sum())
        n_act = int(act_pos.sum())
        precision = tp / n_pred if n_pred else None
        recall = tp / n_act if n_act else None
        p_ci = clopper_pearson(tp, n_pred, alpha) if n_pred else None
        r_ci = clopper_pearson(tp, n_act, alpha) if n_act else None
        out.append(ClassPR(cls, tp, n_pred, n_act, precision, recall, p_ci, r_ci))
    return out


def pr_curve(records: pd.DataFrame, lead: int, percentile_grid,
             model: str = "gpr",
             policy: EscalationPolicy = DEFAULT_POLICY) -> pd.DataFrame:
    """One any-positive-change (precision, recall) point per percentile."""
    grid = [float(q) for q in percentile_grid]
    if any(not (0.0 < q < 1.0) for q in grid):
        raise ValueError("percentile grid must lie inside (0, 1)")
    points = []
    for q in grid:
        row = next(r for r in pr_by_class(records, lead, model, q, policy)
                   if r.delta_class == "any")
        points.append({"lead": lead, "percentile": q, "precision": row.precision,
                       "recall": row.recall, "tp": row.tp,
                       "n_predicted": row.n_predicted, "n_actual": row.n_actual})
    return pd.DataFrame(points)


def label_counts(records: pd.DataFrame, model: str | None = None,
                 policy: EscalationPolicy = DEFAULT_POLICY) -> pd.DataFrame:
    """Counts of actual positive level changes per (lead, class).

    Labels depend only on actuals, so any single model family's records
    index them; pass ``model`` to pick one explicitly.
    """
    if model is None:
        model = records["model"].iloc[0]
    out = []
    for lead in sorted(records["lead"].unique()):
        rows = records[(records["lead"] == lead) & (records["model"] == model)]
        rows = rows.dropna(subset=["actual"])
        _, act_delta = _deltas(rows, None, policy)
        for cls in POSITIVE_CLASSES:
            if cls == "any":
                count = int(np.sum(act_delta > 0))
            else:
                count = int(np.sum(act_delta == int(cls)))
            out.append({"lead": int(lead), "delta_class": cls, "count": count})
    return pd.DataFrame(out)
