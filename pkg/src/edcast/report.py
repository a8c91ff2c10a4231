"""Backtest report assembly and tidy plot-data emission.

The report bundles per-(day, lead, model) point metrics, per-class
level-change precision/recall with exact CIs, percentile PR curves, and
actual label counts.  Plot-data files are tidy long-format tables, one per
figure analogue; rendering is left to external tools.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .metrics import (
    DEFAULT_POLICY,
    EscalationPolicy,
    concordance,
    label_counts,
    pr_by_class,
    pr_curve,
    r_squared,
    rmse,
)

FLOAT_FORMAT = "%.17g"


@dataclass
class BacktestReport:
    daily: pd.DataFrame            # target_day, lead, model, r2, rmse, concordance, n
    classification: pd.DataFrame   # lead, model, delta_class, precision/recall + CIs
    curves: pd.DataFrame           # lead, percentile, precision, recall (any-class)
    labels: pd.DataFrame           # lead, delta_class, count


def build_daily(records: pd.DataFrame) -> pd.DataFrame:
    rows = []
    usable = records.dropna(subset=["actual"])
    for (day, lead, model), g in usable.groupby(["target_day", "lead", "model"]):
        a = g["actual"].to_numpy(dtype=float)
        f = g["mean"].to_numpy(dtype=float)
        rows.append({
            "target_day": int(day), "lead": int(lead), "model": model,
            "r2": r_squared(a, f) if len(g) >= 2 else None,
            "rmse": rmse(a, f),
            "concordance": concordance(a, f) if len(g) >= 2 else None,
            "n": len(g),
        })
    return pd.DataFrame(rows)


def build_classification(records: pd.DataFrame,
                         policy: EscalationPolicy = DEFAULT_POLICY,
                         alpha: float = 0.05) -> pd.DataFrame:
    rows = []
    for model in sorted(records["model"].unique()):
        sub = records[records["model"] == model]
        for lead in sorted(sub["lead"].unique()):
            for pr in pr_by_class(sub, int(lead), model, None, policy, alpha):
                rows.append({
                    "lead": int(lead), "model": model,
                    "delta_class": pr.delta_class,
                    "tp": pr.tp, "n_predicted": pr.n_predicted,
                    "n_actual": pr.n_actual,
                    "precision": pr.precision, "recall": pr.recall,
                    "precision_ci_lo": pr.precision_ci[0] if pr.precision_ci else None,
                    "precision_ci_hi": pr.precision_ci[1] if pr.precision_ci else None,
                    "recall_ci_lo": pr.recall_ci[0] if pr.recall_ci else None,
                    "recall_ci_hi": pr.recall_ci[1] if pr.recall_ci else None,
                })
    return pd.DataFrame(rows)


def build_curves(records: pd.DataFrame, percentiles,
                 policy: EscalationPolicy = DEFAULT_POLICY) -> pd.DataFrame:
    gpr = records[records["model"] == "gpr"]
    if gpr.empty:
        return pd.DataFrame(columns=["lead", "percentile", "precision", "recall",
                                     "tp", "n_predicted", "n_actual"])
    frames = []
    for lead in sorted(gpr["lead"].unique()):
        sub = gpr[gpr["lead"] == lead]
        frames.append(pr_curve(sub, int(lead), percentiles, "gpr", policy))
    return pd.concat(frames, ignore_index=True)


def build_report(records: pd.DataFrame, percentiles,
                 policy: EscalationPolicy = DEFAULT_POLICY) -> BacktestReport:
    return BacktestReport(
        daily=build_daily(records),
        classification=build_classification(records, policy),
        curves=build_curves(records, percentiles, policy),
        labels=label_counts(records, policy=policy),
    )


# ---------------------------------------------------------------------------
# file emission
# ---------------------------------------------------------------------------


def _write(df: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_report(report: BacktestReport, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for name, df in (("daily_metrics", report.daily),
                     ("classification", report.classification),
                     ("pr_curves", report.curves),
                     ("label_counts", report.labels)):
        path = out_dir / f"{name}.csv"
        _write(df, path)
        written.append(path)
    return written


def write_plot_data(report: BacktestReport, out_dir: Path,
                    training_mode: str = "warm") -> list[Path]:
    """Five tidy tables mirroring the result figures.

    fig3a: daily R2/RMSE per model and lead, with a 7-day trailing moving
    average added at emission time.  fig3b: the daily GPR R2 series tagged
    with this run's training mode (warm vs de_novo); comparing modes means
    concatenating two runs' files.  fig4a: precision/recall by class with
    CIs.  fig4b: percentile PR curves.  fig4c: actual label counts by lead.
    """
    out_dir = Path(out_dir)
    daily = report.daily.sort_values(["model", "lead", "target_day"])

    long_rows = []
    for metric in ("r2", "rmse"):
        part = daily[["target_day", "lead", "model", metric]].rename(
            columns={metric: "value"})
        part = part.assign(metric=metric)
        part["value_ma7"] = (
            part.groupby(["model", "lead"])["value"]
            .transform(lambda s: s.rolling(7, min_periods=1).mean()))
        long_rows.append(part)
    fig3a = pd.concat(long_rows, ignore_index=True)[
        ["target_day", "lead", "model", "metric", "value", "value_ma7"]]

    gpr_daily = daily[daily["model"] == "gpr"]
    fig3b = gpr_daily[["target_day", "lead", "r2"]].assign(training_mode=training_mode)[
        ["target_day", "lead", "training_mode", "r2"]]

    cls = report.classification
    fig4a_rows = []
    for metric in ("precision", "recall"):
        part = cls[["lead", "model", "delta_class", metric,
                    f"{metric}_ci_lo", f"{metric}_ci_hi",
                    "n_predicted" if metric == "precision" else "n_actual"]].copy()
        part.columns = ["lead", "model", "delta_class", "value", "ci_lo", "ci_hi",
                        "support"]
        part["metric"] = metric
        fig4a_rows.append(part)
    fig4a = pd.concat(fig4a_rows, ignore_index=True)[
        ["lead", "model", "delta_class", "metric", "value", "ci_lo", "ci_hi", "support"]]

    fig4b = report.curves[["lead", "percentile", "precision", "recall"]]
    fig4c = report.labels

    written = []
    for name, df in (("fig3a", fig3a), ("fig3b", fig3b), ("fig4a", fig4a),
                     ("fig4b", fig4b), ("fig4c", fig4c)):
        path = out_dir / f"{name}.csv"
        _write(df, path)
        written.append(path)
    return written
