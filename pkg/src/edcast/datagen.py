"""Seeded synthetic ED visit generator.

Arrivals follow an inhomogeneous Poisson process (thinning against a
daily/weekly seasonal rate curve), with log-normal lengths of stay,
configurable categorical mixes, and an optional step change in rate and mix
partway through the span to mimic an abrupt regime shift.

The generator emits raw visit records in the same format the cleaning step
consumes, including a small dose of the messiness cleaning is specified to
handle: occasional zero/absent length-of-stay candidates, missing arrival
times, out-of-range vitals, unknown sexes, and rare category values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from datetime import datetime, timedelta

import numpy as np

from .features import (
    ARRIVAL_METHODS,
    CTAS_LEVELS,
    DISTANCE_BINS,
    VisitRecord,
)

DAILY_PEAK_HOUR = 18.0
WEEKLY_PEAK_HOUR = 34.0  # Monday early afternoon

DEFAULT_LANGUAGE_PROBS = {
    "english": 0.62, "french": 0.08, "mandarin": 0.06, "spanish": 0.05,
    "arabic": 0.05, "urdu": 0.04, "punjabi": 0.03, "tamil": 0.03,
    "somali": 0.02, "turkish": 0.0005, "": 0.0195,
}
DEFAULT_METHOD_PROBS = {
    "walk": 0.42, "car": 0.33, "ambulance": 0.13, "transfer": 0.06,
    "police": 0.02, "air": 0.01, "other": 0.03,
}
DEFAULT_CTAS_PROBS = {"1": 0.01, "2": 0.12, "3": 0.45, "4": 0.32, "5": 0.08, "": 0.02}
DEFAULT_DISTANCE_PROBS = {"0-1": 0.16, "1-2": 0.22, "2-3": 0.23, "3-4": 0.17,
                          "4-10": 0.16, "10+": 0.06}
DEFAULT_SEX_PROBS = {"female": 0.487, "male": 0.509, "": 0.004}
DEFAULT_LAB_PROBS = {
    "cbc": 0.25, "electrolytes": 0.17, "crp": 0.14, "glucose": 0.10,
    "urinalysis": 0.10, "blood_culture": 0.07, "creatinine": 0.06,
    "liver_panel": 0.04, "respiratory_pcr": 0.035, "strep_test": 0.02,
    "lactate": 0.01, "esr": 0.003, "monospot": 0.002,
}
DEFAULT_DI_PROBS = {"xray": 0.55, "ultrasound": 0.25, "ct": 0.13,
                    "mri": 0.04, "fluoroscopy": 0.025, "echo": 0.005}


@dataclass(frozen=True)
class ShiftConfig:
    """Step change applied from 00:00 of a 1-based scenario day (closed left)."""

    day: int
    rate_multiplier: float = 0.5
    method_probs: dict | None = None
    ctas_probs: dict | None = None

    def __post_init__(self):
        if self.day < 1:
            raise ValueError("shift day must be >= 1")
        if self.rate_multiplier < 0:
            raise ValueError("shift rate_multiplier must be non-negative")


@dataclass(frozen=True)
class ScenarioConfig:
    start: datetime
    days: int
    base_rate: float = 14.0  # visits/hour before seasonality
    daily_amplitude: float = 0.75
    weekly_amplitude: float = 0.08
    los_median_minutes: float = 110.0
    los_sigma: float = 0.45
    return_prob: float = 0.045
    seed: int = 0
    shift: ShiftConfig | None = None
    language_probs: dict = field(default_factory=lambda: dict(DEFAULT_LANGUAGE_PROBS))
    method_probs: dict = field(default_factory=lambda: dict(DEFAULT_METHOD_PROBS))
    ctas_probs: dict = field(default_factory=lambda: dict(DEFAULT_CTAS_PROBS))
    distance_probs: dict = field(default_factory=lambda: dict(DEFAULT_DISTANCE_PROBS))
    sex_probs: dict = field(default_factory=lambda: dict(DEFAULT_SEX_PROBS))
    lab_probs: dict = field(default_factory=lambda: dict(DEFAULT_LAB_PROBS))
    di_probs: dict = field(default_factory=lambda: dict(DEFAULT_DI_PROBS))

    def __post_init__(self):
        if self.days < 0:
            raise ValueError("days must be non-negative")
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        if not (0 <= self.daily_amplitude < 1 and 0 <= self.weekly_amplitude < 1):
            raise ValueError("seasonal amplitudes must lie in [0, 1)")
        if self.los_median_minutes <= 0 or self.los_sigma <= 0:
            raise ValueError("LOS parameters must be positive")
        if self.shift is not None and self.days and self.shift.day > self.days:
            raise ValueError("shift day falls outside the scenario span")
        for name in ("language_probs", "method_probs", "ctas_probs",
                     "distance_probs", "sex_probs", "lab_probs", "di_probs"):
            probs = getattr(self, name)
            total = sum(probs.values())
            if not math.isclose(total, 1.0, abs_tol=1e-6):
                raise ValueError(f"{name} must sum to 1, got {total}")
        if set(self.method_probs) - set(ARRIVAL_METHODS):
            raise ValueError("method_probs must use the canonical 7 arrival methods")
        if set(self.distance_probs) - set(DISTANCE_BINS):
            raise ValueError("distance_probs must use the 6 distance bins")
        if set(self.ctas_probs) - set(CTAS_LEVELS[:5]) - {""}:
            raise ValueError("ctas_probs must use levels 1-5 or ''")

    @property
    def end(self) -> datetime:
        return self.start + timedelta(days=self.days)


@dataclass(frozen=True)
class EffectiveParams:
    rate_multiplier: float
    method_probs: dict
    ctas_probs: dict


def apply_shift(config: ScenarioConfig, hour: datetime) -> EffectiveParams:
    """Parameters in force at the given hour; the shift boundary is closed
    on the left (the shift hour itself uses the shifted parameters)."""
    shift = config.shift
    if shift is None:
        return EffectiveParams(1.0, config.method_probs, config.ctas_probs)
    boundary = config.start + timedelta(days=shift.day - 1)
    if hour < boundary:
        return EffectiveParams(1.0, config.method_probs, config.ctas_probs)
    return EffectiveParams(shift.rate_multiplier,
                           shift.method_probs or config.method_probs,
                           shift.ctas_probs or config.ctas_probs)


def hourly_rate(config: ScenarioConfig, at: datetime) -> float:
    """Seasonal arrival intensity (visits/hour) at one instant."""
    hod = at.hour + at.minute / 60.0
    how = at.weekday() * 24.0 + hod
    daily = 1.0 + config.daily_amplitude * math.cos(
        2 * math.pi * (hod - DAILY_PEAK_HOUR) / 24.0)
    weekly = 1.0 + config.weekly_amplitude * math.cos(
        2 * math.pi * (how - WEEKLY_PEAK_HOUR) / 168.0)
    return config.base_rate * daily * weekly * apply_shift(config, at).rate_multiplier


def _sample_categorical(rng, probs: dict) -> str:
    keys = list(probs.keys())
    p = np.array([probs[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def generate_visits(config: ScenarioConfig) -> list[VisitRecord]:
    """Thinned inhomogeneous Poisson arrivals with per-visit attributes.

    Deterministic given the config (all draws come from one seeded stream in
    arrival order).
    """
    rng = np.random.default_rng(config.seed)
    total_hours = config.days * 24
    if total_hours == 0:
        return []
    max_mult = max(1.0, config.shift.rate_multiplier) if config.shift else 1.0
    lam_max = config.base_rate * (1 + config.daily_amplitude) \
        * (1 + config.weekly_amplitude) * max_mult
    n_candidates = int(rng.poisson(lam_max * total_hours))
    offsets = np.sort(rng.uniform(0.0, total_hours, size=n_candidates))
    accept_u = rng.uniform(0.0, 1.0, size=n_candidates)

    # physician roster: a global pool with a per-day duty subset
    pool = [f"md{k:02d}" for k in range(40)]

    visits: list[VisitRecord] = []
    recent_discharges: list[tuple[datetime, str]] = []
    duty_cache: dict[int, list[str]] = {}
    patient_counter = 0

    for off, u in zip(offsets, accept_u):
        at = config.start + timedelta(hours=float(off))
        at = at.replace(second=0, microsecond=0)
        if u >= hourly_rate(config, at) / lam_max:
            continue
        eff = apply_shift(config, at)

        day_index = int(off // 24)
        if day_index not in duty_cache:
            day_rng = np.random.default_rng((config.seed, 77, day_index))
            duty_cache[day_index] = list(day_rng.choice(pool, size=10, replace=False))
        duty = duty_cache[day_index]

        # returning patient?
        cutoff = at - timedelta(hours=72)
        eligible = [pid for when, pid in recent_discharges if cutoff <= when <= at]
        if eligible and rng.uniform() < config.return_prob:
            pid = eligible[int(rng.integers(0, len(eligible)))]
        else:
            patient_counter += 1
            pid = f"p{patient_counter:06d}"

        los = float(np.exp(rng.normal(math.log(config.los_median_minutes),
                                      config.los_sigma)))
        los_a: float | None = round(los, 1)
        los_b: float | None = round(los * float(np.exp(rng.normal(0.0, 0.05))), 1)
        roll = rng.uniform()
        if roll < 0.01:
            los_a = 0.0
        elif roll < 0.03:
            los_b = 0.0
        elif roll < 0.031:
            los_a = los_b = 0.0
        elif roll < 0.0315:
            los_a = los_b = None  # dropped by cleaning

        arrival: datetime | None = at
        if rng.uniform() < 0.0003:
            arrival = None  # dropped by cleaning

        age = float(rng.uniform(0.0, 18.0))
        pulse = float(rng.normal(120.0 - 3.0 * age, 15.0))
        if rng.uniform() < 0.01:
            pulse = 250.0  # outside the validity range
        resp = float(rng.normal(28.0 - 0.8 * age, 6.0))
        if rng.uniform() < 0.005:
            resp = 95.0
        bp = f"{rng.normal(100 + 2 * age, 10):.0f}/{rng.normal(62 + age, 8):.0f}"

        def maybe(value, p_missing=0.10):
            return None if rng.uniform() < p_missing else value

        n_labs = int(rng.poisson(0.9))
        labs = tuple(_sample_categorical(rng, config.lab_probs) for _ in range(n_labs))
        n_di = int(rng.poisson(0.35))
        imaging = tuple(_sample_categorical(rng, config.di_probs) for _ in range(n_di))
        n_md = int(rng.integers(1, 4))
        physicians = tuple(duty[int(i)] for i in rng.choice(len(duty), size=n_md,
                                                            replace=False))

        visits.append(VisitRecord(
            patient_id=pid,
            arrival_time=arrival,
            los_a=los_a,
            los_b=los_b,
            sex=_sample_categorical(rng, config.sex_probs),
            language=_sample_categorical(rng, config.language_probs),
            arrival_method=_sample_categorical(rng, eff.method_probs),
            ctas=_sample_categorical(rng, eff.ctas_probs),
            distance_bin=_sample_categorical(rng, config.distance_probs),
            blood_pressure=bp,
            pulse=maybe(pulse),
            respiration=maybe(resp),
            temperature=maybe(float(rng.normal(37.2, 0.7))),
            weight=maybe(round(4.0 + 3.2 * age + float(rng.normal(0, 3)), 1)),
            age=round(age, 2),
            medications=float(rng.poisson(1.2)),
            labs=labs,
            imaging=imaging,
            physicians=physicians,
        ))
        if arrival is not None and (los_a or los_b):
            est_los = max(los_a or 0.0, los_b or 0.0, 1.0)
            recent_discharges.append((arrival + timedelta(minutes=est_los), pid))
            if len(recent_discharges) > 4000:
                recent_discharges = recent_discharges[-2000:]
    return visits


def standard_scenario(start: datetime = datetime(2024, 1, 1),
                      prelude_days: int = 21, eval_days: int = 90,
                      tail_days: int = 2, seed: int = 0,
                      shifted: bool = False, shift_eval_day: int = 45,
                      rate_multiplier: float = 0.5) -> ScenarioConfig:
    """The default desk-scale scenario: a training prelude, an evaluation
    span, and a tail so every forecast finds its actual.

    With ``shifted`` the arrival rate steps down at 00:00 of the given
    evaluation day (1-based).
    """
    shift = None
    if shifted:
        shift = ShiftConfig(day=prelude_days + shift_eval_day,
                            rate_multiplier=rate_multiplier)
    return ScenarioConfig(start=start, days=prelude_days + eval_days + tail_days,
                          seed=seed, shift=shift)


# ---------------------------------------------------------------------------
# scenario (de)serialization
# ---------------------------------------------------------------------------


def scenario_to_dict(config: ScenarioConfig) -> dict:
    d = asdict(config)
    d["start"] = config.start.isoformat()
    if config.shift is not None:
        d["shift"] = {k: v for k, v in asdict(config.shift).items() if v is not None}
    return d


def _require(d: dict, key: str, kind, ctx: str):
    if key not in d:
        raise ValueError(f"{ctx}: missing required field {key!r}")
    value = d[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ValueError(f"{ctx}: field {key!r} must be {kind.__name__}, "
                         f"got {type(value).__name__}")
    return value


def scenario_from_dict(d: dict) -> ScenarioConfig:
    """Build a scenario from parsed JSON, with field-level error messages."""
    ctx = "scenario"
    start_raw = _require(d, "start", str, ctx)
    try:
        start = datetime.fromisoformat(start_raw)
    except ValueError as exc:
        raise ValueError(f"{ctx}: field 'start' is not an ISO timestamp: {exc}")
    kwargs = {
        "start": start,
        "days": _require(d, "days", int, ctx),
        "seed": int(d.get("seed", 0)),
    }
    for key in ("base_rate", "daily_amplitude", "weekly_amplitude",
                "los_median_minutes", "los_sigma", "return_prob"):
        if key in d:
            kwargs[key] = _require(d, key, float, ctx)
    for key in ("language_probs", "method_probs", "ctas_probs",
                "distance_probs", "sex_probs", "lab_probs", "di_probs"):
        if key in d:
            kwargs[key] = _require(d, key, dict, ctx)
    if d.get("shift") is not None:
        s = _require(d, "shift", dict, ctx)
        kwargs["shift"] = ShiftConfig(
            day=_require(s, "day", int, "scenario.shift"),
            rate_multiplier=float(s.get("rate_multiplier", 0.5)),
            method_probs=s.get("method_probs"),
            ctas_probs=s.get("ctas_probs"),
        )
    known = set(kwargs) | {"shift", "start", "days", "seed"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"{ctx}: unknown fields {sorted(unknown)}")
    try:
        return ScenarioConfig(**kwargs)
    except ValueError as exc:
        raise ValueError(f"{ctx}: {exc}")
