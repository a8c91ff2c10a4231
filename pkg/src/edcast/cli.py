"""Command-line orchestration: generate, backtest, report.

Every output is reproducible from (config, seed): manifests carry content
digests, run directories are locked while in use, and an interrupted
backtest resumes from its last completed retrain date.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime
from pathlib import Path

import pandas as pd

from . import backtest as bt
from . import datagen, features, report
from .gp import GPTrainingError

ENV_OUTPUT_ROOT = "EDCAST_OUTPUT_ROOT"
RUN_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def resolve_path(raw: str) -> Path:
    """Relative paths land under $EDCAST_OUTPUT_ROOT when it is set."""
    path = Path(raw)
    root = os.environ.get(ENV_OUTPUT_ROOT)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


class RunLock:
    """Exclusive ownership of a run directory via a lock file."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"run directory is locked by another process ({self.path}); "
                "remove the stale lock file if no run is active") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON: {exc}")


def _scenario_from_config(d: dict) -> datagen.ScenarioConfig:
    try:
        return datagen.scenario_from_dict(d)
    except ValueError as exc:
        raise ConfigError(str(exc))


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def write_generated(out_dir: Path, config: datagen.ScenarioConfig) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    visits = datagen.generate_visits(config)
    visits_path = out_dir / "visits.csv"
    features.write_visits(visits_path, visits)
    (out_dir / "scenario.json").write_text(
        json.dumps(datagen.scenario_to_dict(config), indent=1) + "\n")
    manifest = {
        "schema_version": RUN_SCHEMA_VERSION,
        "seed": config.seed,
        "visit_count": len(visits),
        "sha256": sha256_file(visits_path),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def cmd_generate(args) -> int:
    config = _scenario_from_config(_load_json(Path(args.config), "scenario config"))
    if args.seed is not None:
        config = datagen.scenario_from_dict(
            {**datagen.scenario_to_dict(config), "seed": args.seed})
    out_dir = resolve_path(args.out)
    manifest = write_generated(out_dir, config)
    print(f"generated {manifest['visit_count']} visits -> {out_dir / 'visits.csv'}")
    print(f"sha256 {manifest['sha256']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------


def _parse_run_config(d: dict) -> tuple[datagen.ScenarioConfig | None, str | None,
                                        bt.ProtocolConfig, int | None, str | None]:
    if d.get("schema_version") != RUN_SCHEMA_VERSION:
        raise ConfigError(f"run config: unsupported schema_version "
                          f"{d.get('schema_version')!r} (expected {RUN_SCHEMA_VERSION})")
    if "protocol" not in d:
        raise ConfigError("run config: missing required field 'protocol'")
    scenario = None
    visits_file = d.get("visits_file")
    if "scenario" in d:
        scenario = _scenario_from_config(d["scenario"])
    elif visits_file is None:
        raise ConfigError("run config: provide either 'scenario' or 'visits_file'")
    try:
        protocol = bt.protocol_from_dict(d["protocol"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"run config: bad protocol: {exc}")
    return scenario, visits_file, protocol, d.get("seed"), d.get("output_dir")


def prepare_hourly(scenario: datagen.ScenarioConfig | None, visits_file: str | None,
                   clean_seed: int) -> pd.DataFrame:
    if scenario is not None:
        visits = datagen.generate_visits(scenario)
        start, end = scenario.start, scenario.end
    else:
        path = Path(visits_file)
        if not path.exists():
            raise DataError(f"visits file not found: {path}")
        visits = features.read_visits(path)
        start = end = None
    cleaned, tally = features.clean_visits(visits, seed=clean_seed)
    if not cleaned:
        raise DataError("no usable visits after cleaning")
    return features.hourly_aggregate(cleaned, start=start, end=end)


def cmd_backtest(args) -> int:
    config_path = Path(args.config)
    raw = _load_json(config_path, "run config")
    scenario, visits_file, protocol, seed, output_dir = _parse_run_config(raw)
    if args.seed is not None:
        seed = args.seed
    if seed is not None:
        if scenario is not None:
            scenario = datagen.scenario_from_dict(
                {**datagen.scenario_to_dict(scenario), "seed": seed})
        protocol = bt.protocol_from_dict(
            {**bt.protocol_to_dict(protocol), "seed": seed})
    if args.families:
        protocol = bt.protocol_from_dict(
            {**bt.protocol_to_dict(protocol), "families": args.families.split(",")})
    if args.max_days is not None:
        protocol = bt.protocol_from_dict(
            {**bt.protocol_to_dict(protocol), "stop_after_days": args.max_days})

    out_raw = args.out or output_dir
    if out_raw is None:
        raise ConfigError("no output directory: set 'output_dir' in the config "
                          "or pass --out")
    run_dir = resolve_path(out_raw)

    with RunLock(run_dir):
        hourly = prepare_hourly(scenario, visits_file,
                                clean_seed=(scenario.seed if scenario else protocol.seed) + 1)
        echo = {
            "schema_version": RUN_SCHEMA_VERSION,
            "scenario": datagen.scenario_to_dict(scenario) if scenario else None,
            "visits_file": visits_file,
            "protocol": bt.protocol_to_dict(protocol),
            "seed": seed,
        }
        (run_dir / "config.json").write_text(json.dumps(echo, indent=1) + "\n")
        run = bt.run_backtest(hourly, protocol, run_dir=run_dir)
        retrain_path = run_dir / "retrain_log.csv"
        run.retrain_log.to_csv(retrain_path, index=False, float_format="%.17g")

    n_flagged = int((~run.retrain_log["status"].isin(["converged"])).sum())
    print(f"backtest complete: {len(run.records)} forecasts, "
          f"{len(run.retrain_log)} retrains ({n_flagged} not fully converged, "
          f"statuses logged in {retrain_path.name})")
    if run.start_offset_hours:
        print(f"note: evaluation began {run.start_offset_hours} hours late "
              "(insufficient history at the configured start)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def load_run_records(run_dir: Path) -> tuple[pd.DataFrame, dict]:
    config = _load_json(run_dir / "config.json", "run config echo")
    state_path = run_dir / "state.json"
    if not state_path.exists():
        raise DataError(f"incomplete run: missing {state_path}")
    state = json.loads(state_path.read_text())
    days = state.get("completed_days", [])
    if not days:
        raise DataError("incomplete run: no completed days in state.json")
    missing = []
    frames = []
    for day in days:
        path = run_dir / "forecasts" / f"{day}.csv"
        if not path.exists():
            missing.append(str(path))
        else:
            frames.append(pd.read_csv(path, parse_dates=["issue_time", "target_time"],
                                      float_precision="round_trip"))
    if missing:
        raise DataError("incomplete run: missing forecast files: " + ", ".join(missing))
    return pd.concat(frames, ignore_index=True), config


def cmd_report(args) -> int:
    run_dir = resolve_path(args.run)
    records, config = load_run_records(run_dir)
    protocol = bt.protocol_from_dict(config["protocol"])
    rep = report.build_report(records, protocol.percentiles)
    reports_dir = run_dir / "reports"
    plot_dir = run_dir / "plotdata"
    written = report.write_report(rep, reports_dir)
    mode = "warm" if protocol.warm_start else "de_novo"
    written += report.write_plot_data(rep, plot_dir, training_mode=mode)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edcast",
        description="Hourly ED census forecasting: synthetic scenarios, "
                    "rolling backtests, and evaluation reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic visit file")
    gen.add_argument("--config", required=True, help="scenario JSON path")
    gen.add_argument("--out", required=True,
                     help=f"output directory (relative paths resolve against "
                          f"${ENV_OUTPUT_ROOT} when set)")
    gen.add_argument("--seed", type=int, default=None, help="override scenario seed")
    gen.set_defaults(func=cmd_generate)

    back = sub.add_parser("backtest", help="run the rolling forecast protocol")
    back.add_argument("--config", required=True, help="run config JSON path")
    back.add_argument("--out", default=None, help="run directory override")
    back.add_argument("--seed", type=int, default=None, help="override run seed")
    back.add_argument("--families", default=None,
                      help="comma-separated model families "
                           "(gpr,ar_lasso,local_lasso)")
    back.add_argument("--max-days", type=int, default=None,
                      help="stop after N evaluation days (resumable later)")
    back.set_defaults(func=cmd_backtest)

    rep = sub.add_parser("report", help="emit metric tables and plot data")
    rep.add_argument("--run", required=True, help="completed run directory")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GPTrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
