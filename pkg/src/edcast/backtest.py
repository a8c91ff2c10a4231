"""Rolling-origin forecast protocol.

Every midnight of the evaluation span, one model per (family, lead) is
retrained on a window that ends strictly before the midnight boundary; every
hour, each model issues forecasts for leads 1..24.  A forecast issued at
hour h conditions only on hours <= h: feature rows run through h, training
labels through h, and the GP's conditioning window slides forward hourly
under hyperparameters frozen since the last midnight retrain.

With a run directory the backtest is resumable at midnight boundaries:
per-retrain hyperparameters and coefficients are persisted as text
documents, completed days are recorded in a state file guarded by a config
digest, and re-running reproduces the uninterrupted forecasts bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field, asdict
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from . import gp
from .features import DesignMatrix, GPView, build_design, gp_feature_view
from .gp import GPInit, GPWindow, OptConfig
from .kernels import KernelSpec
from .lasso import (
    LassoConfig,
    LassoFit,
    LocalWeightConfig,
    fit_lasso,
    local_weights,
    predict_lasso,
    select_lambda_fp,
    select_length_scale,
)
from .normalize import Normalizer

log = logging.getLogger("edcast.backtest")

VALID_FAMILIES = ("gpr", "ar_lasso", "local_lasso")
STATE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ProtocolConfig:
    eval_start: datetime
    eval_days: int
    leads: tuple[int, ...] = tuple(range(1, 25))
    families: tuple[str, ...] = ("gpr", "ar_lasso")
    gp_window_days: int = 3
    lasso_window_days: int | None = None  # None: all available history
    warm_start: bool = True
    opt: OptConfig = field(default_factory=lambda: OptConfig(max_iters=50))
    first_fit_max_iters: int = 500  # burn-in budget for cold-started retrains
    noise_floor: float = 0.2  # lower bound on GP noise variance (normalized units)
    lasso: LassoConfig = field(default_factory=LassoConfig)
    local: LocalWeightConfig = field(default_factory=LocalWeightConfig)
    percentiles: tuple[float, ...] = tuple(round(0.05 * k, 2) for k in range(1, 20))
    seed: int = 0
    stop_after_days: int | None = None

    def __post_init__(self):
        if self.eval_days < 1:
            raise ValueError("eval_days must be positive")
        if self.eval_start != self.eval_start.replace(hour=0, minute=0,
                                                      second=0, microsecond=0):
            raise ValueError("eval_start must be a midnight timestamp")
        if not self.leads or any(not 1 <= l <= 24 for l in self.leads):
            raise ValueError("leads must be within 1..24")
        bad = set(self.families) - set(VALID_FAMILIES)
        if bad:
            raise ValueError(f"unknown model families: {sorted(bad)}")
        if self.gp_window_days < 1:
            raise ValueError("gp_window_days must be positive")


@dataclass
class BacktestRun:
    records: pd.DataFrame
    retrain_log: pd.DataFrame
    eval_start: datetime
    start_offset_hours: int = 0


def protocol_to_dict(p: ProtocolConfig) -> dict:
    d = asdict(p)
    d["eval_start"] = p.eval_start.isoformat()
    d["opt"] = asdict(p.opt)
    d["lasso"] = asdict(p.lasso)
    d["local"] = asdict(p.local)
    return d


def protocol_from_dict(d: dict) -> ProtocolConfig:
    kwargs = dict(d)
    kwargs["eval_start"] = datetime.fromisoformat(d["eval_start"])
    if "opt" in d:
        kwargs["opt"] = OptConfig(**d["opt"])
    if "lasso" in d:
        lc = dict(d["lasso"])
        if lc.get("lambda_grid") is not None:
            lc["lambda_grid"] = tuple(lc["lambda_grid"])
        kwargs["lasso"] = LassoConfig(**lc)
    if "local" in d:
        loc = dict(d["local"])
        loc["candidate_scales"] = tuple(loc["candidate_scales"])
        kwargs["local"] = LocalWeightConfig(**loc)
    for key in ("leads", "families", "percentiles"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return ProtocolConfig(**kwargs)


def config_digest(protocol: ProtocolConfig, hourly: pd.DataFrame) -> str:
    d = protocol_to_dict(protocol)
    d.pop("stop_after_days", None)  # ops knob, not part of run identity
    h = hashlib.sha256()
    h.update(json.dumps(d, sort_keys=True).encode())
    h.update(np.ascontiguousarray(hourly.to_numpy(dtype=float)).tobytes())
    h.update(str(hourly.index[0]).encode())
    h.update(str(len(hourly)).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# persistence helpers
# ---------------------------------------------------------------------------


def _params_path(run_dir: Path, family: str, lead: int, date: datetime) -> Path:
    return run_dir / "params" / family / f"lead_{lead:02d}" / f"{date:%Y-%m-%d}.txt"


def _forecasts_path(run_dir: Path, date: datetime) -> Path:
    return run_dir / "forecasts" / f"{date:%Y-%m-%d}.csv"


def _lasso_document(fit: LassoFit, y_norm: Normalizer, column_names,
                    model: str, length_scale: float | None = None) -> str:
    lines = [
        f"schema_version = {STATE_SCHEMA_VERSION}",
        "kind = edcast.lasso_coefs",
        f"model = {model}",
        f"lambda = {fit.lam!r}",
        f"intercept = {fit.intercept!r}",
        f"y_mean = {float(y_norm.mean)!r}",
        f"y_std = {float(y_norm.std)!r}",
    ]
    if length_scale is not None:
        lines.append(f"length_scale = {float(length_scale)!r}")
    lines.append(f"n_active = {len(fit.active)}")
    for j in fit.active:
        lines.append(f"{column_names[j]} = {float(fit.coef[j])!r}")
    return "\n".join(lines) + "\n"


_RECORD_FLOATS = ("mean", "variance", "actual", "current")


def write_day_records(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(rows)
    df.to_csv(path, index=False, float_format="%.17g")


def read_day_records(path: Path) -> list[dict]:
    df = pd.read_csv(path, parse_dates=["issue_time", "target_time"],
                     float_precision="round_trip")
    df["issue_time"] = df["issue_time"].map(lambda t: t.to_pydatetime())
    df["target_time"] = df["target_time"].map(lambda t: t.to_pydatetime())
    return df.to_dict("records")


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


class _Runner:
    def __init__(self, hourly: pd.DataFrame, protocol: ProtocolConfig,
                 run_dir: Path | None):
        self.protocol = protocol
        self.run_dir = Path(run_dir) if run_dir is not None else None
        # the design normalizer is refitted per retrain window; build_design
        # only assembles the lag structure here
        design_span = (hourly.index[10], hourly.index[-1])
        self.design = build_design(hourly, design_span)
        self.view = gp_feature_view(self.design)
        census_col = self.design.column_names.index("census_max__lag0")
        self.census = self.design.raw[:, census_col]
        self.hours = self.design.hours
        self.spec = KernelSpec(self.view.layout)
        self.digest = config_digest(protocol, hourly)

        self.W = protocol.gp_window_days * 24
        self.max_lead = max(protocol.leads)
        needed = self.W + self.max_lead + 1
        if "local_lasso" in protocol.families:
            needed = max(needed, int(protocol.local.validation_span) + 24
                         + self.max_lead + 1)
        eval_ts = protocol.eval_start
        self.start_offset = 0
        while True:
            idx = int(self.hours.searchsorted(eval_ts))
            if idx >= len(self.hours):
                raise ValueError("evaluation start lies beyond the available hourly data")
            if self.hours[idx] == eval_ts and idx >= needed:
                break
            eval_ts += timedelta(hours=24)
            self.start_offset += 24
        if self.start_offset:
            log.warning("insufficient history at eval start; beginning %d hours later",
                        self.start_offset)
        self.m0 = idx

        self.gp_inits: dict[int, GPInit] = {}
        self.lam: dict[int, float] = {}
        self.completed: list[str] = []
        self.records: list[dict] = []
        self.retrain_log: list[dict] = []

    # -- state ---------------------------------------------------------------

    def _state_path(self) -> Path:
        return self.run_dir / "state.json"

    def load_state(self) -> int:
        """Resume from the last completed retrain date; returns the first
        day index still to run."""
        if self.run_dir is None:
            return 0
        path = self._state_path()
        if not path.exists():
            return 0
        state = json.loads(path.read_text())
        if state.get("config_digest") != self.digest:
            raise ValueError(
                "run directory was produced by a different config/data digest; "
                "refusing to resume")
        self.completed = list(state.get("completed_days", []))
        self.lam = {int(k): float(v) for k, v in state.get("lambda", {}).items()}
        for date_str in self.completed:
            self.records.extend(read_day_records(
                _forecasts_path(self.run_dir, datetime.fromisoformat(date_str))))
        if self.completed and self.protocol.warm_start and "gpr" in self.protocol.families:
            last = datetime.fromisoformat(self.completed[-1])
            for lead in self.protocol.leads:
                init = gp.load_init(_params_path(self.run_dir, "gpr", lead, last),
                                    self.spec)
                if init.source == "warm":
                    self.gp_inits[lead] = init
        return len(self.completed)

    def save_state(self) -> None:
        if self.run_dir is None:
            return
        state = {
            "schema_version": STATE_SCHEMA_VERSION,
            "config_digest": self.digest,
            "completed_days": self.completed,
            "lambda": {str(k): v for k, v in self.lam.items()},
        }
        path = self._state_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(state, indent=1))
        tmp.replace(path)

    def _persist(self, family: str, lead: int, date: datetime, text: str) -> None:
        if self.run_dir is None:
            return
        path = _params_path(self.run_dir, family, lead, date)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)

    # -- per-family retrain + hourly forecasts --------------------------------

    def _window_rows(self, end_row: int, length: int | None, lead: int):
        start = 0 if length is None else max(0, end_row - length + 1)
        rows = slice(start, end_row + 1)
        labels = self.census[rows.start + lead: rows.stop + lead]
        return rows, labels

    def run_gpr(self, day: int, m: int, date: datetime, out: list[dict]) -> None:
        proto = self.protocol
        for lead in proto.leads:
            e_fit = m - 1 - lead
            rows, y_raw = self._window_rows(e_fit, self.W, lead)
            norm = Normalizer.fit(self.view.X[rows], axis=0)
            window = GPWindow.from_raw(
                np.arange(rows.stop - rows.start, dtype=float),
                norm.normalize(self.view.X[rows]), y_raw)
            init = self.gp_inits.get(lead) if proto.warm_start else None
            if init is None:
                init = gp.default_init(self.spec, noise_floor=proto.noise_floor)
            opt = proto.opt
            if init.source == "default":
                opt = OptConfig(learning_rate=opt.learning_rate,
                                mll_tolerance=opt.mll_tolerance,
                                max_iters=max(opt.max_iters, proto.first_fit_max_iters),
                                beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
            model = gp.fit(self.spec, window, init, opt,
                           noise_floor=proto.noise_floor)
            self.gp_inits[lead] = GPInit(model.params, model.noise_raw, "warm")
            self._persist("gpr", lead, date,
                          gp.params_document(model.params, model.noise_raw))
            self.retrain_log.append({
                "eval_day": day + 1, "model": "gpr", "lead": lead,
                "window_rows": rows.stop - rows.start,
                "iterations": model.iterations, "status": model.status,
                "mll": model.mll, "lam": np.nan, "length_scale": np.nan,
                "init_source": init.source,
            })
            for k in range(24):
                h = m + k
                e = h - lead
                c_rows = slice(e - self.W + 1, e + 1)
                c_norm = Normalizer.fit(self.view.X[c_rows], axis=0)
                c_window = GPWindow.from_raw(
                    np.arange(self.W, dtype=float),
                    c_norm.normalize(self.view.X[c_rows]),
                    self.census[h - self.W + 1: h + 1])
                cond = gp.condition(self.spec, model.params, model.noise_raw,
                                    c_window, noise_floor=proto.noise_floor)
                q = np.concatenate([[self.W - 1 + lead],
                                    c_norm.normalize(self.view.X[h])])
                mean_n, var_n = gp.posterior_predict(cond, q[None, :])
                y_norm = c_window.y_norm
                out.append(self._record(h, lead, "gpr",
                                        float(y_norm.de_normalize(mean_n)[0]),
                                        float(var_n[0]) * float(y_norm.std) ** 2))

    def _lasso_day_fit(self, m: int, lead: int):
        e_fit = m - 1 - lead
        rows, y_raw = self._window_rows(e_fit, self._lasso_window_rows(), lead)
        norm = Normalizer.fit(self.design.raw[rows], axis=0)
        Xn = norm.normalize(self.design.raw[rows])
        y_norm = Normalizer.fit(y_raw)
        yn = y_norm.normalize(y_raw)
        return rows, Xn, yn, norm, y_norm, y_raw

    def _lasso_window_rows(self) -> int | None:
        days = self.protocol.lasso_window_days
        return None if days is None else days * 24

    def _ensure_lambda(self, lead: int, Xn, yn) -> float:
        if lead not in self.lam:
            sel = select_lambda_fp(Xn, yn, self.protocol.lasso,
                                   seed=self.protocol.seed * 1009 + lead)
            if sel.flagged:
                log.warning("lead %d: no grid lambda met the decoy bound; "
                            "using lambda_max", lead)
            self.lam[lead] = sel.lam
        return self.lam[lead]

    def run_ar_lasso(self, day: int, m: int, date: datetime, out: list[dict]) -> None:
        for lead in self.protocol.leads:
            rows, Xn, yn, norm, y_norm, _ = self._lasso_day_fit(m, lead)
            lam = self._ensure_lambda(lead, Xn, yn)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fit = fit_lasso(Xn, yn, lam)
            self._persist("ar_lasso", lead, date,
                          _lasso_document(fit, y_norm, self.design.column_names,
                                          "ar_lasso"))
            self.retrain_log.append({
                "eval_day": day + 1, "model": "ar_lasso", "lead": lead,
                "window_rows": rows.stop - rows.start, "iterations": fit.sweeps,
                "status": "converged" if fit.converged else "sweep_cap",
                "mll": np.nan, "lam": lam, "length_scale": np.nan,
                "init_source": "cold",
            })
            Xq = norm.normalize(self.design.raw[m:m + 24])
            for k in range(24):
                out.append(self._record(m + k, lead, "ar_lasso",
                                        predict_lasso(fit, Xq[k], y_norm), np.nan))

    def run_local_lasso(self, day: int, m: int, date: datetime, out: list[dict]) -> None:
        for lead in self.protocol.leads:
            rows, Xn, yn, norm, y_norm, y_raw = self._lasso_day_fit(m, lead)
            lam = self._ensure_lambda(lead, Xn, yn)
            target_times = np.arange(rows.start + lead, rows.stop + lead, dtype=float)
            scale = select_length_scale(target_times, self.design.raw[rows], y_raw,
                                        self.protocol.local, lam)
            w = local_weights(target_times, float(m), scale)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fit = fit_lasso(Xn, yn, lam, sample_weights=w)
            self._persist("local_lasso", lead, date,
                          _lasso_document(fit, y_norm, self.design.column_names,
                                          "local_lasso", length_scale=scale))
            self.retrain_log.append({
                "eval_day": day + 1, "model": "local_lasso", "lead": lead,
                "window_rows": rows.stop - rows.start, "iterations": fit.sweeps,
                "status": "converged" if fit.converged else "sweep_cap",
                "mll": np.nan, "lam": lam, "length_scale": scale,
                "init_source": "cold",
            })
            Xq = norm.normalize(self.design.raw[m:m + 24])
            for k in range(24):
                out.append(self._record(m + k, lead, "local_lasso",
                                        predict_lasso(fit, Xq[k], y_norm), np.nan))

    def _record(self, h: int, lead: int, model: str, mean: float,
                variance: float) -> dict:
        target = h + lead
        actual = float(self.census[target]) if target < len(self.census) else np.nan
        issue_time = self.hours[h].to_pydatetime()
        target_time = issue_time + timedelta(hours=lead)
        return {
            "issue_time": issue_time,
            "eval_day": (h - self.m0) // 24 + 1,
            "lead": lead,
            "model": model,
            "mean": mean,
            "variance": variance,
            "target_time": target_time,
            "target_day": (target - self.m0) // 24 + 1,
            "actual": actual,
            "current": float(self.census[h]),
        }

    # -- main loop -------------------------------------------------------------

    def run(self) -> BacktestRun:
        first = self.load_state()
        days = self.protocol.eval_days
        if self.protocol.stop_after_days is not None:
            days = min(days, self.protocol.stop_after_days)
        for day in range(first, days):
            m = self.m0 + 24 * day
            if m + 24 > len(self.hours):
                raise ValueError("hourly data does not cover the evaluation span")
            date = self.hours[m].to_pydatetime()
            day_rows: list[dict] = []
            for family in self.protocol.families:
                if family == "gpr":
                    self.run_gpr(day, m, date, day_rows)
                elif family == "ar_lasso":
                    self.run_ar_lasso(day, m, date, day_rows)
                elif family == "local_lasso":
                    self.run_local_lasso(day, m, date, day_rows)
            if self.run_dir is not None:
                write_day_records(_forecasts_path(self.run_dir, date), day_rows)
                self.completed.append(date.date().isoformat())
                self.save_state()
            self.records.extend(day_rows)
            log.info("completed evaluation day %d/%d", day + 1, days)
        records = pd.DataFrame(self.records)
        retrain = pd.DataFrame(self.retrain_log)
        return BacktestRun(records, retrain, self.hours[self.m0].to_pydatetime(),
                           self.start_offset)


def run_backtest(hourly_data: pd.DataFrame, protocol_config: ProtocolConfig,
                 run_dir=None) -> BacktestRun:
    """Run the rolling protocol over the evaluation span.

    ``hourly_data`` is the hourly feature table from
    :func:`edcast.features.hourly_aggregate`; it must extend far enough
    before ``eval_start`` for the training windows and (ideally) one day
    past the evaluation span so every forecast finds its actual.
    """
    return _Runner(hourly_data, protocol_config, run_dir).run()
