"""Visit cleaning and hourly design-matrix construction.

Raw visit rows are cleaned record by record (length-of-stay resolution,
vital-sign range filters, categorical consolidation, 72-hour return flags),
aggregated into hourly records (census max/variance at minute resolution,
per-category shares and per-vital means split by arrivals vs discharges),
and expanded into a lagged design matrix normalized with training-window
statistics only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np
import pandas as pd

from .kernels import FeatureGroup, FeatureLayout, GroupId
from .normalize import Normalizer

# ---------------------------------------------------------------------------
# vocabularies
# ---------------------------------------------------------------------------

LANGUAGES = (
    "english", "french", "spanish", "mandarin", "cantonese", "arabic",
    "portuguese", "urdu", "hindi", "punjabi", "tamil", "farsi", "russian",
    "somali", "vietnamese", "korean", "polish", "italian", "german", "greek",
    "turkish", "ukrainian", "bengali", "tagalog", "missing", "other",
)  # 26

# Cleaning maps every raw arrival mode onto 7 canonical categories; the
# one-hot vocabulary keeps 15 slots (canonical + raw aliases) so the design
# dimensionality is stable even when alias slots are structurally empty.
ARRIVAL_METHODS = ("air", "ambulance", "car", "police", "transfer", "walk", "other")
ARRIVAL_METHOD_SLOTS = ARRIVAL_METHODS + (
    "helicopter", "fixed_wing", "ems", "paramedic", "taxi", "bus",
    "stretcher", "unknown",
)  # 15

_ARRIVAL_ALIASES = {
    "helicopter": "air", "fixed_wing": "air", "fixed wing": "air",
    "ems": "ambulance", "paramedic": "ambulance",
    "taxi": "car", "bus": "car", "private vehicle": "car", "auto": "car",
    "stretcher": "transfer",
    "unknown": "other", "": "other",
    "on foot": "walk", "foot": "walk",
}

CTAS_LEVELS = ("1", "2", "3", "4", "5", "missing")  # 6
DISTANCE_BINS = ("0-1", "1-2", "2-3", "3-4", "4-10", "10+")  # 6 logged-km bins
SEXES = ("female", "male")
VITALS = ("pulse", "respiration", "weight", "diastolic", "systolic",
          "temperature", "age")

LAB_TYPES = (
    "cbc", "electrolytes", "creatinine", "glucose", "crp", "blood_culture",
    "urine_culture", "urinalysis", "liver_panel", "coagulation", "lipase",
    "troponin", "lactate", "blood_gas", "esr", "ferritin", "tsh", "monospot",
    "strep_test", "respiratory_pcr", "other",
)  # 21
DI_TYPES = ("xray", "ct", "mri", "ultrasound", "echo", "fluoroscopy", "other")  # 7

RESPIRATION_RANGE = (0.0, 80.0)
PULSE_RANGE = (20.0, 220.0)
RARE_LANGUAGE_FRACTION = 0.001
RARE_ORDER_FRACTION = 0.01
N_LAGS = 10  # lags 0..10 inclusive


def base_feature_names() -> tuple[str, ...]:
    names = ["census_max", "census_var", "n_arrivals", "n_discharges",
             "arr_mean_physicians", "dis_mean_physicians", "physicians_unique_10h"]
    for side in ("arr", "dis"):
        names += [f"{side}_share_lang_{v}" for v in LANGUAGES]
    for side in ("arr", "dis"):
        names += [f"{side}_share_method_{v}" for v in ARRIVAL_METHOD_SLOTS]
    for side in ("arr", "dis"):
        names += [f"{side}_share_ctas_{v}" for v in CTAS_LEVELS]
    for side in ("arr", "dis"):
        names += [f"{side}_share_dist_{v}" for v in DISTANCE_BINS]
    for side in ("arr", "dis"):
        names += [f"{side}_share_sex_{v}" for v in SEXES]
    names += ["arr_share_return", "dis_share_return"]
    names += ["arr_mean_medications", "dis_mean_medications"]
    for side in ("arr", "dis"):
        names += [f"{side}_mean_{v}" for v in VITALS]
    names += [f"lab_{v}" for v in LAB_TYPES]
    names += [f"di_{v}" for v in DI_TYPES]
    return tuple(names)


FEATURE_NAMES = base_feature_names()
assert len(FEATURE_NAMES) == 163, len(FEATURE_NAMES)


# ---------------------------------------------------------------------------
# visit records
# ---------------------------------------------------------------------------


@dataclass
class VisitRecord:
    patient_id: str
    arrival_time: datetime | None
    los_a: float | None = None
    los_b: float | None = None
    los_minutes: float | None = None
    discharge_time: datetime | None = None
    sex: str = ""
    language: str = ""
    arrival_method: str = ""
    ctas: str = ""
    distance_km: float | None = None
    distance_bin: str = ""
    blood_pressure: str = ""
    pulse: float | None = None
    respiration: float | None = None
    systolic: float | None = None
    diastolic: float | None = None
    temperature: float | None = None
    weight: float | None = None
    age: float | None = None
    medications: float | None = None
    labs: tuple[str, ...] = ()
    imaging: tuple[str, ...] = ()
    physicians: tuple[str, ...] = ()
    return_72h: bool | None = None


@dataclass(frozen=True)
class CleaningTally:
    n_input: int
    n_dropped_no_arrival: int
    n_dropped_no_los: int
    n_output: int
    languages_consolidated: int
    lab_orders_consolidated: int
    di_orders_consolidated: int
    sexes_assigned: int


VISIT_COLUMNS = (
    "patient_id", "arrival_time", "los_a_minutes", "los_b_minutes", "sex",
    "language", "arrival_method", "ctas", "distance_km", "distance_bin",
    "blood_pressure", "pulse", "respiration", "systolic", "diastolic",
    "temperature", "weight", "age", "medications", "labs", "imaging",
    "physicians", "return_72h",
)


def _opt_float(s: str) -> float | None:
    s = s.strip()
    if not s:
        return None
    try:
        return float(s)
    except ValueError:
        return None


def read_visits(path) -> list[VisitRecord]:
    """Read the delimited visit format (header documented in VISIT_COLUMNS)."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(VISIT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"visit file missing columns: {sorted(missing)}")
        for row in reader:
            arrival = row["arrival_time"].strip()
            rec = VisitRecord(
                patient_id=row["patient_id"].strip(),
                arrival_time=datetime.fromisoformat(arrival) if arrival else None,
                los_a=_opt_float(row["los_a_minutes"]),
                los_b=_opt_float(row["los_b_minutes"]),
                sex=row["sex"].strip().lower(),
                language=row["language"].strip().lower(),
                arrival_method=row["arrival_method"].strip().lower(),
                ctas=row["ctas"].strip().lower(),
                distance_km=_opt_float(row["distance_km"]),
                distance_bin=row["distance_bin"].strip(),
                blood_pressure=row["blood_pressure"].strip(),
                pulse=_opt_float(row["pulse"]),
                respiration=_opt_float(row["respiration"]),
                systolic=_opt_float(row["systolic"]),
                diastolic=_opt_float(row["diastolic"]),
                temperature=_opt_float(row["temperature"]),
                weight=_opt_float(row["weight"]),
                age=_opt_float(row["age"]),
                medications=_opt_float(row["medications"]),
                labs=tuple(t for t in row["labs"].split(";") if t),
                imaging=tuple(t for t in row["imaging"].split(";") if t),
                physicians=tuple(t for t in row["physicians"].split(";") if t),
                return_72h={"": None, "0": False, "1": True}[row["return_72h"].strip()],
            )
            records.append(rec)
    return records


def write_visits(path, records: list[VisitRecord]) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(VISIT_COLUMNS)
        for r in records:
            writer.writerow([
                r.patient_id,
                r.arrival_time.isoformat(timespec="minutes") if r.arrival_time else "",
                fmt(r.los_a), fmt(r.los_b), r.sex, r.language, r.arrival_method,
                r.ctas, fmt(r.distance_km), r.distance_bin, r.blood_pressure,
                fmt(r.pulse), fmt(r.respiration), fmt(r.systolic), fmt(r.diastolic),
                fmt(r.temperature), fmt(r.weight), fmt(r.age), fmt(r.medications),
                ";".join(r.labs), ";".join(r.imaging), ";".join(r.physicians),
                "" if r.return_72h is None else str(int(r.return_72h)),
            ])


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------


EARTH_RADIUS_KM = 6371.0088


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance between two lat/lon points in kilometers."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = math.radians(lat2 - lat1)
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))


def distance_bin_for(logged_km: float) -> str:
    """Bin a logged-kilometer value into the six fixed bins."""
    edges = (1.0, 2.0, 3.0, 4.0, 10.0)
    for edge, label in zip(edges, DISTANCE_BINS):
        if logged_km < edge:
            return label
    return DISTANCE_BINS[-1]


def _resolve_los(rec: VisitRecord) -> float | None:
    candidates = [v for v in (rec.los_a, rec.los_b) if v is not None and v >= 0]
    if not candidates:
        return None
    return max(max(candidates), 1.0)  # zero (or sub-minute) stays floors at 1 minute


def _canonical_method(raw: str) -> str:
    m = raw.strip().lower()
    m = _ARRIVAL_ALIASES.get(m, m)
    return m if m in ARRIVAL_METHODS else "other"


def clean_visits(records: list[VisitRecord], seed: int = 0) -> tuple[list[VisitRecord], CleaningTally]:
    """Apply the full cleaning pass; idempotent on its own output.

    Records lacking an arrival time or both length-of-stay candidates are
    dropped and tallied.  Rare languages (<0.1% of records) and rare
    lab/imaging order types (<1% of orders) consolidate to "other"; unknown
    sexes are randomly assigned with the given seed.
    """
    n_input = len(records)
    kept: list[VisitRecord] = []
    dropped_no_arrival = dropped_no_los = 0
    for rec in records:
        if rec.arrival_time is None:
            dropped_no_arrival += 1
            continue
        los = _resolve_los(rec)
        if los is None:
            dropped_no_los += 1
            continue
        kept.append(replace(rec, los_minutes=los,
                            discharge_time=rec.arrival_time + timedelta(minutes=los)))

    # corpus-wide rarity thresholds
    lang_counts: dict[str, int] = {}
    lab_counts: dict[str, int] = {}
    di_counts: dict[str, int] = {}
    for rec in kept:
        lang = rec.language.strip().lower() or "missing"
        lang_counts[lang] = lang_counts.get(lang, 0) + 1
        for t in rec.labs:
            lab_counts[t.lower()] = lab_counts.get(t.lower(), 0) + 1
        for t in rec.imaging:
            di_counts[t.lower()] = di_counts.get(t.lower(), 0) + 1
    n_kept = len(kept)
    total_labs = sum(lab_counts.values())
    total_dis = sum(di_counts.values())

    def clean_language(raw: str) -> str:
        lang = raw.strip().lower() or "missing"
        if lang not in LANGUAGES:
            return "other"
        if lang in ("missing", "other"):
            return lang
        if n_kept and lang_counts.get(lang, 0) / n_kept < RARE_LANGUAGE_FRACTION:
            return "other"
        return lang

    def clean_order(raw: str, vocab, counts, total) -> str:
        t = raw.strip().lower()
        if t not in vocab or t == "other":
            return "other"
        if total and counts.get(t, 0) / total < RARE_ORDER_FRACTION:
            return "other"
        return t

    rng = np.random.default_rng(seed)
    langs_consolidated = labs_consolidated = dis_consolidated = sexes_assigned = 0
    cleaned: list[VisitRecord] = []
    for rec in kept:
        lang = clean_language(rec.language)
        if lang == "other" and rec.language.strip().lower() not in ("other", ""):
            langs_consolidated += 1

        labs = tuple(clean_order(t, LAB_TYPES, lab_counts, total_labs) for t in rec.labs)
        labs_consolidated += sum(1 for old, new in zip(rec.labs, labs)
                                 if new == "other" and old.lower() != "other")
        imaging = tuple(clean_order(t, DI_TYPES, di_counts, total_dis) for t in rec.imaging)
        dis_consolidated += sum(1 for old, new in zip(rec.imaging, imaging)
                                if new == "other" and old.lower() != "other")

        pulse = rec.pulse
        if pulse is not None and not (PULSE_RANGE[0] <= pulse <= PULSE_RANGE[1]):
            pulse = None
        resp = rec.respiration
        if resp is not None and not (RESPIRATION_RANGE[0] <= resp <= RESPIRATION_RANGE[1]):
            resp = None

        systolic, diastolic = rec.systolic, rec.diastolic
        if systolic is None and diastolic is None and "/" in rec.blood_pressure:
            parts = rec.blood_pressure.split("/")
            if len(parts) == 2:
                systolic = _opt_float(parts[0])
                diastolic = _opt_float(parts[1])

        sex = rec.sex.strip().lower()
        sex = {"f": "female", "m": "male"}.get(sex, sex)
        if sex not in SEXES:
            sex = SEXES[int(rng.integers(0, 2))]
            sexes_assigned += 1

        ctas = rec.ctas.strip().lower()
        if ctas not in CTAS_LEVELS or ctas == "missing":
            ctas = ctas if ctas in CTAS_LEVELS[:5] else "missing"

        if rec.distance_bin in DISTANCE_BINS:
            dist_bin = rec.distance_bin
        elif rec.distance_km is not None and rec.distance_km > 0:
            dist_bin = distance_bin_for(math.log(rec.distance_km))
        else:
            dist_bin = ""

        seen: list[str] = []
        for pid in rec.physicians:
            if pid not in seen:
                seen.append(pid)

        cleaned.append(replace(
            rec,
            language=lang,
            labs=labs,
            imaging=imaging,
            pulse=pulse,
            respiration=resp,
            systolic=systolic,
            diastolic=diastolic,
            sex=sex,
            ctas=ctas,
            arrival_method=_canonical_method(rec.arrival_method),
            distance_bin=dist_bin,
            physicians=tuple(seen),
        ))

    # 72-hour return flags from the cleaned visit history
    order = sorted(range(len(cleaned)), key=lambda i: cleaned[i].arrival_time)
    last_discharge: dict[str, datetime] = {}
    flags = [False] * len(cleaned)
    for i in order:
        rec = cleaned[i]
        prev = last_discharge.get(rec.patient_id)
        if prev is not None and timedelta(0) <= rec.arrival_time - prev <= timedelta(hours=72):
            flags[i] = True
        prior = last_discharge.get(rec.patient_id)
        if prior is None or rec.discharge_time > prior:
            last_discharge[rec.patient_id] = rec.discharge_time
    cleaned = [replace(rec, return_72h=flags[i]) for i, rec in enumerate(cleaned)]

    tally = CleaningTally(n_input, dropped_no_arrival, dropped_no_los,
                          len(cleaned), langs_consolidated, labs_consolidated,
                          dis_consolidated, sexes_assigned)
    return cleaned, tally


# ---------------------------------------------------------------------------
# hourly aggregation
# ---------------------------------------------------------------------------


def _floor_hour(ts: datetime) -> datetime:
    return ts.replace(minute=0, second=0, microsecond=0)


def minute_occupancy(visits, start: datetime, n_hours: int) -> np.ndarray:
    """Patients present at each minute of the span; interval [arrival, discharge)."""
    n_min = n_hours * 60
    diff = np.zeros(n_min + 1)
    for rec in visits:
        a = int((rec.arrival_time - start).total_seconds() // 60)
        d = int((rec.discharge_time - start).total_seconds() // 60)
        if d <= 0 or a >= n_min:
            continue
        diff[max(a, 0)] += 1
        diff[min(d, n_min)] -= 1
    return np.cumsum(diff[:-1])


def hourly_aggregate(visits: list[VisitRecord], start: datetime | None = None,
                     end: datetime | None = None) -> pd.DataFrame:
    """Hourly records: census max/variance at minute resolution plus shares,
    means, and counts split by that hour's arrivals and discharges.

    Hours with no activity emit zero counts; the census carries forward
    through them because occupancy is integrated at minute resolution.
    """
    if not visits and (start is None or end is None):
        raise ValueError("need an explicit span for an empty visit list")
    if start is None:
        start = _floor_hour(min(v.arrival_time for v in visits))
    if end is None:
        last = max(v.discharge_time for v in visits)
        end = _floor_hour(last) + timedelta(hours=1)
    n_hours = int((end - start).total_seconds() // 3600)
    if n_hours <= 0:
        raise ValueError("span must cover at least one hour")

    occupancy = minute_occupancy(visits, start, n_hours).reshape(n_hours, 60)
    data = {name: np.zeros(n_hours) for name in FEATURE_NAMES}
    data["census_max"] = occupancy.max(axis=1).astype(float)
    data["census_var"] = occupancy.var(axis=1)

    def hour_index(ts: datetime) -> int:
        return int((ts - start).total_seconds() // 3600)

    arr_idx = np.array([hour_index(v.arrival_time) for v in visits], dtype=int) \
        if visits else np.zeros(0, dtype=int)
    dis_idx = np.array([hour_index(v.discharge_time) for v in visits], dtype=int) \
        if visits else np.zeros(0, dtype=int)

    for side, idx in (("arr", arr_idx), ("dis", dis_idx)):
        ok = (idx >= 0) & (idx < n_hours)
        rows = idx[ok]
        recs = [v for v, keep in zip(visits, ok) if keep]
        counts = np.zeros(n_hours)
        np.add.at(counts, rows, 1.0)
        data["n_arrivals" if side == "arr" else "n_discharges"] = counts

        def shares(vocab, getter, prefix):
            mat = np.zeros((n_hours, len(vocab)))
            pos = {v: k for k, v in enumerate(vocab)}
            valid_rows, valid_pos = [], []
            for r, rec in zip(rows, recs):
                p = pos.get(getter(rec))
                if p is not None:
                    valid_rows.append(r)
                    valid_pos.append(p)
            if valid_rows:
                np.add.at(mat, (np.array(valid_rows), np.array(valid_pos)), 1.0)
            denom = mat.sum(axis=1, keepdims=True)
            with np.errstate(invalid="ignore"):
                mat = np.where(denom > 0, mat / np.where(denom == 0, 1, denom), 0.0)
            for k, v in enumerate(vocab):
                data[f"{prefix}_{v}"] = mat[:, k]

        shares(LANGUAGES, lambda r: r.language, f"{side}_share_lang")
        shares(ARRIVAL_METHOD_SLOTS, lambda r: r.arrival_method, f"{side}_share_method")
        shares(CTAS_LEVELS, lambda r: r.ctas, f"{side}_share_ctas")
        shares(DISTANCE_BINS, lambda r: r.distance_bin, f"{side}_share_dist")
        shares(SEXES, lambda r: r.sex, f"{side}_share_sex")

        flag_sum = np.zeros(n_hours)
        flag_n = np.zeros(n_hours)
        for r, rec in zip(rows, recs):
            if rec.return_72h is not None:
                flag_sum[r] += float(rec.return_72h)
                flag_n[r] += 1.0
        data[f"{side}_share_return"] = np.where(flag_n > 0, flag_sum / np.where(flag_n == 0, 1, flag_n), 0.0)

        def means(getter, name):
            tot = np.zeros(n_hours)
            cnt = np.zeros(n_hours)
            for r, rec in zip(rows, recs):
                v = getter(rec)
                if v is not None:
                    tot[r] += v
                    cnt[r] += 1.0
            data[name] = np.where(cnt > 0, tot / np.where(cnt == 0, 1, cnt), 0.0)

        means(lambda r: r.medications, f"{side}_mean_medications")
        for vital in VITALS:
            means(lambda r, v=vital: getattr(r, v), f"{side}_mean_{vital}")
        means(lambda r: float(len(r.physicians)), f"{side}_mean_physicians")

    # lab / imaging orders counted by type on the arrival hour
    for rec, r in zip(visits, arr_idx):
        if 0 <= r < n_hours:
            for t in rec.labs:
                data[f"lab_{t}"][r] += 1.0
            for t in rec.imaging:
                data[f"di_{t}"][r] += 1.0

    # unique physicians over the trailing 10 hours of arrivals
    per_hour_ids: list[set] = [set() for _ in range(n_hours)]
    for rec, r in zip(visits, arr_idx):
        if 0 <= r < n_hours:
            per_hour_ids[r].update(rec.physicians)
    uniq = np.zeros(n_hours)
    for h in range(n_hours):
        ids: set = set()
        for k in range(max(0, h - 9), h + 1):
            ids |= per_hour_ids[k]
        uniq[h] = float(len(ids))
    data["physicians_unique_10h"] = uniq

    hours = pd.date_range(start=start, periods=n_hours, freq="h")
    df = pd.DataFrame(data, index=hours)[list(FEATURE_NAMES)]
    df.insert(0, "hour_of_day", hours.hour.astype(float))
    df.index.name = "hour"
    return df


def write_hourly(path, hourly: pd.DataFrame) -> None:
    hourly.to_csv(path, float_format="%.17g", date_format="%Y-%m-%dT%H:%M")


def read_hourly(path) -> pd.DataFrame:
    df = pd.read_csv(path, index_col="hour", parse_dates=["hour"],
                     float_precision="round_trip")
    return df


# ---------------------------------------------------------------------------
# lagged design matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignMatrix:
    """Lagged hourly design: 163 base features at lags 0..10.

    ``raw`` holds unnormalized values; ``values`` are normalized with
    statistics from the training rows only.
    """

    hours: pd.DatetimeIndex
    column_names: tuple[str, ...]
    raw: np.ndarray
    values: np.ndarray
    normalizer: Normalizer
    training_mask: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.raw.shape[0]


def lagged_column_names() -> tuple[str, ...]:
    return tuple(f"{name}__lag{k}" for k in range(N_LAGS + 1) for name in FEATURE_NAMES)


def assemble_lagged(hourly: pd.DataFrame) -> tuple[pd.DatetimeIndex, np.ndarray]:
    """Stack lag-0..10 blocks; the first 10 rows lack history and are excluded."""
    base = hourly[list(FEATURE_NAMES)].to_numpy(dtype=float)
    if base.shape[1] != 163:
        raise ValueError(f"expected 163 base features, got {base.shape[1]}")
    n = base.shape[0]
    if n <= N_LAGS:
        raise ValueError("need more than 10 hourly rows to build lagged design")
    blocks = [base[N_LAGS - k:n - k] for k in range(N_LAGS + 1)]
    return hourly.index[N_LAGS:], np.hstack(blocks)


def build_design(hourly: pd.DataFrame, training_span) -> DesignMatrix:
    """Design matrix with lag columns, normalized on the training span.

    ``training_span`` is an inclusive (start, end) timestamp pair selecting
    the rows whose statistics define the normalizer.  Zero-variance training
    columns keep std 1, so they center to zero rather than exploding.
    """
    hours, raw = assemble_lagged(hourly)
    t0, t1 = training_span
    mask = (hours >= t0) & (hours <= t1)
    if not mask.any():
        raise ValueError("training span selects no design rows")
    norm = Normalizer.fit(raw[mask], axis=0)
    return DesignMatrix(hours, lagged_column_names(), raw, norm.normalize(raw),
                        norm, np.asarray(mask))


# ---------------------------------------------------------------------------
# GP feature view
# ---------------------------------------------------------------------------

GP_VIEW_GROUPS: tuple[tuple[GroupId, tuple[str, ...]], ...] = (
    (GroupId.CENSUS_STATS, ("census_max", "census_var")),
    (GroupId.ARRIVALS_DISCHARGES, ("n_arrivals", "n_discharges")),
    (GroupId.HOUR_OF_DAY, ("hod_sin", "hod_cos")),
    (GroupId.ACUITY_SHARES, tuple(f"arr_share_ctas_{v}" for v in CTAS_LEVELS)),
    (GroupId.ARRIVAL_METHOD_SHARES,
     tuple(f"arr_share_method_{v}" for v in ARRIVAL_METHOD_SLOTS)),
    (GroupId.PHYSICIAN_COUNT, ("arr_mean_physicians", "physicians_unique_10h")),
)


@dataclass(frozen=True)
class GPView:
    """Lag-0 feature groups plus the window-relative time index (raw units)."""

    hours: pd.DatetimeIndex
    t: np.ndarray
    X: np.ndarray
    layout: FeatureLayout
    column_names: tuple[str, ...]


def gp_view_layout() -> FeatureLayout:
    groups = []
    start = 0
    for gid, cols in GP_VIEW_GROUPS:
        groups.append(FeatureGroup(gid, tuple(range(start, start + len(cols)))))
        start += len(cols)
    return FeatureLayout(tuple(groups), start)


def hour_of_day(hours: pd.DatetimeIndex) -> np.ndarray:
    """Clock hour 0..23 per timestamp (the raw value behind the sin/cos pair)."""
    return np.asarray(hours.hour, dtype=float)


def gp_feature_view(design: DesignMatrix, window_start=None) -> GPView:
    """Extract the six GP feature groups at lag 0 (unnormalized).

    The time index counts hours since ``window_start`` (default: the first
    design row); it is re-zeroed by the caller whenever the conditioning
    window moves.
    """
    name_to_col = {n: i for i, n in enumerate(design.column_names)}
    hod = hour_of_day(design.hours)
    derived = {
        "hod_sin": np.sin(2 * np.pi * hod / 24.0),
        "hod_cos": np.cos(2 * np.pi * hod / 24.0),
    }
    cols = []
    names = []
    for _gid, group_cols in GP_VIEW_GROUPS:
        for name in group_cols:
            if name in derived:
                cols.append(derived[name])
            else:
                key = f"{name}__lag0"
                if key not in name_to_col:
                    raise ValueError(f"design is missing GP view column {key}")
                cols.append(design.raw[:, name_to_col[key]])
            names.append(name)
    X = np.column_stack(cols)
    if window_start is None:
        window_start = design.hours[0]
    t = (design.hours - window_start) / pd.Timedelta(hours=1)
    return GPView(design.hours, np.asarray(t, dtype=float), X,
                  gp_view_layout(), tuple(names))
