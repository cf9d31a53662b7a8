"""Glue between simulator, fingerprinting and evaluation: run directories,
survey-to-database, report bundles and controller-intensity calibration."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .evaluate import (
    EvalConfig,
    ErrorReport,
    FeedIndex,
    MismatchReport,
    ScanStats,
    TruthLog,
    TruthVisit,
    build_report,
    inter_scan_stats,
    mismatch_report,
    write_cdf_samples,
    write_error_reports,
    write_mismatch_reports,
    write_scan_stats,
    write_truth,
)
from .feed import RtlsRecord, classify_all, filter_records, read_feed, write_feed
from .fingerprint import DEFAULT_OFFLINE_DURATION_S, FingerprintDb, build_db
from .model import ApDirectory, Band, LandmarkId, read_ap_directory, read_landmarks, write_ap_directory, write_landmarks
from .simulator import SimResult, SimScenario, desk_scenario, run_ground_truth, save_scenario, survey_scenario

log = logging.getLogger(__name__)

FEED_FILE = "feed.csv"
TRUTH_FILE = "truth.csv"
APS_FILE = "aps.csv"
LANDMARKS_FILE = "landmarks.csv"
CLIENTS_FILE = "clients.csv"
SCENARIO_FILE = "scenario.json"

# Mismatch rates of the reference campus deployment; calibration aims at these.
REFERENCE_MISMATCH_PCT = {Band.BAND24: 57.3, Band.BAND5: 30.6}
DEFAULT_CALIBRATION_GRID = tuple(round(0.1 * i, 1) for i in range(0, 21))
DEFAULT_CALIBRATION_SEEDS = (1000, 1001, 1002)


# -- run directories --------------------------------------------------------


def truth_log(result: SimResult) -> TruthLog:
    return TruthLog(TruthVisit(r.client_id, r.landmark, r.enter_ms, r.exit_ms) for r in result.truth)


def write_run(scenario: SimScenario, result: SimResult, out_dir: str | Path) -> Path:
    """Write feed, truth, AP directory, landmarks, client states and the resolved scenario."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_feed(out / FEED_FILE, result.records)
    write_truth(out / TRUTH_FILE, result.truth)
    write_ap_directory(out / APS_FILE, scenario.directory())
    write_landmarks(out / LANDMARKS_FILE, scenario.landmarks())
    with open(out / CLIENTS_FILE, "w", encoding="utf-8", newline="") as fh:
        fh.write("client_id,state,assoc_band\n")
        for cid in sorted(result.clients):
            band = result.assoc_bands.get(cid)
            fh.write(f"{cid},{result.clients[cid].value},{band.value if band else ''}\n")
    save_scenario(scenario, out / SCENARIO_FILE)
    return out


@dataclass
class RunData:
    records: list[RtlsRecord]
    truth: TruthLog
    directory: ApDirectory
    landmarks: list[LandmarkId]
    states: dict[str, str] = field(default_factory=dict)
    malformed: int = 0


def load_run(run_dir: str | Path) -> RunData:
    """Read a run directory written by :func:`write_run` (or assembled by hand)."""
    d = Path(run_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"run directory {d} does not exist")
    for name in (FEED_FILE, TRUTH_FILE, APS_FILE, LANDMARKS_FILE):
        if not (d / name).is_file():
            raise FileNotFoundError(f"run directory {d} lacks {name}")
    errors: list = []
    records = read_feed(d / FEED_FILE, errors)
    for lineno, exc in errors[:5]:
        log.warning("%s:%d: %s", d / FEED_FILE, lineno, exc)
    landmarks = read_landmarks(d / LANDMARKS_FILE)
    from .evaluate import read_truth

    truth = read_truth(d / TRUTH_FILE, {lm.key: lm for lm in landmarks})
    states = {}
    if (d / CLIENTS_FILE).is_file():
        with open(d / CLIENTS_FILE, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                states[row["client_id"]] = row["state"]
    return RunData(records, truth, read_ap_directory(d / APS_FILE), landmarks, states, len(errors))


# -- fingerprinting ---------------------------------------------------------


def db_from_feed(
    directory: ApDirectory,
    records: Iterable[RtlsRecord],
    truth: TruthLog,
    bands: Iterable[Band] = tuple(Band),
    duration: float = DEFAULT_OFFLINE_DURATION_S,
) -> tuple[FingerprintDb, list[str]]:
    """Offline database from a survey feed and the surveyor's landmark visits."""
    classified = classify_all(filter_records(records))
    visits = [(v.landmark, v.enter_ms, v.exit_ms) for c in truth.clients() for v in truth.visits(c)]
    return build_db(directory, classified, visits, bands, duration)


def survey_db(scenario: SimScenario, dwell_s: int = 300) -> tuple[FingerprintDb, SimResult]:
    """Simulate the offline survey of ``scenario`` and build its database."""
    sv = survey_scenario(scenario, dwell_s)
    res = run_ground_truth(sv)
    db, warnings = db_from_feed(scenario.directory(), res.records, truth_log(res), duration=dwell_s)
    for w in warnings:
        log.debug("survey: %s", w)
    return db, res


# -- evaluation -------------------------------------------------------------


@dataclass
class ReportBundle:
    errors: list[ErrorReport]
    mismatches: list[MismatchReport]
    scan_stats: dict[str, ScanStats]


def evaluate_records(
    records: Sequence[RtlsRecord],
    truth: TruthLog,
    db: FingerprintDb,
    directory: ApDirectory | None = None,
    states: dict[str, str] | None = None,
    cfg: EvalConfig = EvalConfig(),
    matrix=None,
) -> ReportBundle:
    errors, mismatches = build_report(records, truth, db, directory, matrix, cfg)
    return ReportBundle(errors, mismatches, inter_scan_stats(records, states or {}))


def write_reports(bundle: ReportBundle, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_error_reports(out / "errors.csv", bundle.errors)
    write_mismatch_reports(out / "mismatch.csv", bundle.mismatches)
    write_scan_stats(out / "scan_stats.csv", bundle.scan_stats)
    cdfs = write_cdf_samples(out / "cdf", bundle.errors)
    return [out / "errors.csv", out / "mismatch.csv", out / "scan_stats.csv", *cdfs]


def mismatch_rates(result: SimResult, db: FingerprintDb, cfg: EvalConfig = EvalConfig()) -> dict[Band, MismatchReport]:
    index = FeedIndex(result.records, cfg.max_age, cfg.min_rssi)
    truth = truth_log(result)
    return {b: mismatch_report(b, index, truth, db, cfg) for b in Band}


# -- calibration ------------------------------------------------------------


@dataclass
class Calibration:
    intensity: dict[Band, float]
    targets: dict[Band, float]
    seeds: tuple[int, ...]
    table: list[dict]  # one row per grid point: intensity and mean rate per band

    def to_json(self) -> dict:
        return {
            "intensity24": self.intensity[Band.BAND24],
            "intensity5": self.intensity[Band.BAND5],
            "targets": {b.value: t for b, t in self.targets.items()},
            "seeds": list(self.seeds),
            "table": self.table,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Calibration":
        return cls(
            {Band.BAND24: float(doc["intensity24"]), Band.BAND5: float(doc["intensity5"])},
            {Band(k): float(v) for k, v in doc.get("targets", {}).items()},
            tuple(doc.get("seeds", ())),
            list(doc.get("table", [])),
        )


def calibrate(
    seeds: Sequence[int] = DEFAULT_CALIBRATION_SEEDS,
    grid: Sequence[float] = DEFAULT_CALIBRATION_GRID,
    targets: dict[Band, float] | None = None,
    factory: Callable[..., SimScenario] = desk_scenario,
    cfg: EvalConfig = EvalConfig(),
) -> Calibration:
    """Sweep controller intensity and pick, per band, the grid point whose
    seed-averaged mismatch rate is closest to the target.

    Both bands share one sweep (same intensity in each band per grid point);
    the bands' controllers act independently, so each band's choice is read
    off its own column. Ties go to the lower intensity.
    """
    targets = dict(targets or REFERENCE_MISMATCH_PCT)
    dbs = {s: survey_db(factory(seed=s))[0] for s in seeds}
    table = []
    for k in grid:
        rates = {b: [] for b in Band}
        for s in seeds:
            res = run_ground_truth(factory(seed=s, intensity24=k, intensity5=k))
            for b, rep in mismatch_rates(res, dbs[s], cfg).items():
                rates[b].append(rep.rate)
        row = {"intensity": k, **{b.value: sum(v) / len(v) for b, v in rates.items()}}
        table.append(row)
        log.info("calibration k=%.2f %s", k, {b: round(row[b.value], 1) for b in (Band.BAND24, Band.BAND5)})
    chosen = {}
    for b, target in targets.items():
        best = min(table, key=lambda r: (abs(r[b.value] - target), r["intensity"]))
        chosen[b] = best["intensity"]
    return Calibration(chosen, targets, tuple(seeds), table)


def save_calibration(cal: Calibration, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cal.to_json(), fh, indent=1)
        fh.write("\n")


def load_calibration(path: str | Path) -> Calibration:
    with open(path, encoding="utf-8") as fh:
        return Calibration.from_json(json.load(fh))
