"""Command-line entry point: ``rtlsloc <subcommand> ...``.

Subcommands::

    simulate     scenario -> run directory (feed, truth, AP and landmark tables)
    fingerprint  survey feed(s) + visits -> fingerprint db
    evaluate     run directory + db -> error, mismatch and scan-latency reports
    classify     annotate a feed archive with the frame class of each record
    calibrate    sweep controller intensity against target mismatch rates
    serve        live UDP listener plus HTTP query API
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .evaluate import EvalConfig, read_truth
from .feed import DEFAULT_PROBE_RATES, classify_record, iter_lines, serialize_record
from .fingerprint import ClassFilter, save_db, load_db
from .localizer import Heuristic, HeuristicConfig, MatchScope
from .model import Band, parse_band, read_ap_directory, read_landmarks

log = logging.getLogger("rtlsloc")


class CliError(Exception):
    """Reported as ``rtlsloc: error: ...`` with exit status 1."""


def _setup_logging(verbosity: int, level: str | None = None) -> None:
    if level is None:
        level = "DEBUG" if verbosity >= 2 else "INFO" if verbosity == 1 else "WARNING"
    logging.basicConfig(level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _scenario_from_args(args):
    from .simulator import desk_scenario, load_scenario, survey_scenario

    if args.scenario:
        if not Path(args.scenario).is_file():
            raise CliError(f"scenario file {args.scenario} does not exist")
        sc = load_scenario(args.scenario)
    else:
        k24, k5 = args.intensity24, args.intensity5
        if args.calibration:
            from .pipeline import load_calibration

            cal = load_calibration(args.calibration)
            k24 = cal.intensity[Band.BAND24] if k24 is None else k24
            k5 = cal.intensity[Band.BAND5] if k5 is None else k5
        kw = {"seed": args.seed}
        if args.duration is not None:
            kw["duration_s"] = args.duration
        if k24 is not None:
            kw["intensity24"] = k24
        if k5 is not None:
            kw["intensity5"] = k5
        sc = desk_scenario(**kw)
    if args.survey:
        sc = survey_scenario(sc, args.dwell)
    return sc


def cmd_simulate(args) -> int:
    from .pipeline import write_run
    from .simulator import run_ground_truth

    sc = _scenario_from_args(args)
    res = run_ground_truth(sc)
    out = write_run(sc, res, args.out)
    log.info("wrote %d records, %d truth rows to %s", len(res.records), len(res.truth), out)
    return 0


def _feed_paths(source: Path) -> list[Path]:
    if source.is_dir():
        paths = sorted(p for p in source.iterdir() if p.is_file() and p.suffix in (".csv", ".jsonl", ".txt"))
        if not paths:
            raise CliError(f"feed directory {source} contains no feed files")
        return paths
    if source.is_file():
        return [source]
    raise CliError(f"feed path {source} does not exist")


def cmd_fingerprint(args) -> int:
    from .pipeline import APS_FILE, FEED_FILE, LANDMARKS_FILE, TRUTH_FILE, db_from_feed

    if args.run:
        run = Path(args.run)
        feeds, visits, aps, lms = [run / FEED_FILE], run / TRUTH_FILE, run / APS_FILE, run / LANDMARKS_FILE
    else:
        missing = [n for n in ("feeds", "visits", "aps", "landmarks") if getattr(args, n) is None]
        if missing:
            raise CliError("without --run, give " + ", ".join(f"--{m}" for m in missing))
        feeds, visits, aps, lms = _feed_paths(Path(args.feeds)), Path(args.visits), Path(args.aps), Path(args.landmarks)
    for p in (*feeds, visits, aps, lms):
        if not p.is_file():
            raise CliError(f"missing input {p}")
    errors: list = []
    records = []
    for p in feeds:
        with open(p, encoding="utf-8") as fh:
            records.extend(iter_lines(fh, errors))
    if errors:
        log.warning("skipped %d malformed feed lines", len(errors))
    if not records:
        where = args.feeds or args.run
        raise CliError(f"no feed records found in {where}")
    landmarks = read_landmarks(lms)
    truth = read_truth(visits, {lm.key: lm for lm in landmarks})
    bands = [parse_band(b) for b in args.band] if args.band else list(Band)
    db, warnings = db_from_feed(read_ap_directory(aps), records, truth, bands, args.duration)
    for w in warnings:
        log.warning("%s", w)
    if len(db) == 0:
        raise CliError("no landmark produced a fingerprint")
    save_db(db, args.out)
    log.info("wrote %d fingerprints to %s", len(db), args.out)
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import Cell
    from .pipeline import evaluate_records, load_run, write_reports

    try:
        run = load_run(args.run)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None
    if not Path(args.db).is_file():
        raise CliError(f"fingerprint db {args.db} does not exist")
    db = load_db(args.db)
    cfg = EvalConfig(
        window_s=args.window,
        hop_s=args.hop,
        aggregate=args.aggregate,
        heuristic_cfg=HeuristicConfig(scope=MatchScope(args.scope)),
    )
    matrix = None
    if args.band or args.heuristic or args.filter:
        bands = [parse_band(b) for b in args.band] if args.band else db.bands()
        hs = [Heuristic(h) for h in args.heuristic] if args.heuristic else list(Heuristic)
        fs = [ClassFilter(f) for f in args.filter] if args.filter else list(ClassFilter)
        matrix = [Cell(b, h, f) for b in bands for h in hs for f in fs]
    bundle = evaluate_records(run.records, run.truth, db, run.directory, run.states, cfg, matrix)
    out = args.out or Path(args.run) / "reports"
    paths = write_reports(bundle, out)
    for rep in bundle.mismatches:
        print(f"mismatch {rep.band.value}: {rep.rate:.1f}% of {rep.total} windows")
    log.info("wrote %d report files to %s", len(paths), out)
    return 0


def cmd_classify(args) -> int:
    probe = frozenset(args.probe_rates) if args.probe_rates else DEFAULT_PROBE_RATES
    src = sys.stdin if args.input == "-" else None
    if src is None and not Path(args.input).is_file():
        raise CliError(f"feed archive {args.input} does not exist")
    errors: list = []
    fh = src or open(args.input, encoding="utf-8")
    out = sys.stdout if args.output in (None, "-") else open(args.output, "w", encoding="utf-8", newline="\n")
    try:
        out.write("timestamp,client_id,age,channel,ap_id,assoc,data_rate,rssi,frame_class\n")
        for r in iter_lines(fh, errors):
            out.write(f"{serialize_record(r)},{classify_record(r, probe).value}\n")
    finally:
        if fh is not sys.stdin:
            fh.close()
        if out is not sys.stdout:
            out.close()
    for lineno, exc in errors:
        log.warning("line %d: %s", lineno, exc)
    if errors and args.strict:
        raise CliError(f"{len(errors)} malformed lines")
    return 0


def cmd_calibrate(args) -> int:
    from .pipeline import calibrate, save_calibration

    grid = [float(k) for k in args.grid] if args.grid else None
    kw = {"seeds": args.seeds}
    if grid:
        kw["grid"] = grid
    cal = calibrate(**kw)
    save_calibration(cal, args.out)
    for row in cal.table:
        print(f"k={row['intensity']:.2f}  Band24 {row['Band24']:5.1f}%  Band5 {row['Band5']:5.1f}%")
    print(f"chosen: intensity24={cal.intensity[Band.BAND24]} intensity5={cal.intensity[Band.BAND5]}")
    return 0


def cmd_serve(args) -> int:
    from .service import ConfigError, ServiceConfig, serve

    try:
        cfg = ServiceConfig.from_file(args.config) if args.config else ServiceConfig()
        cfg = cfg.with_overrides(
            feed_host=args.feed_host, feed_port=args.feed_port, api_host=args.api_host, api_port=args.api_port,
            db_path=args.db, ap_directory_path=args.aps, window_s=args.window, heuristic=args.heuristic,
            band=args.band, max_age_s=args.max_age, min_rssi_dbm=args.min_rssi, log_level=args.log_level,
        ).validate()
    except (ConfigError, OSError) as exc:
        raise CliError(str(exc)) from None
    logging.getLogger().setLevel(cfg.log_level.upper())
    serve(cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtlsloc", description="Server-side WiFi localization from RTLS feeds.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write a run directory")
    s.add_argument("--scenario", help="scenario JSON (full or {'preset': ...}); default is the desk preset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, help="simulated seconds (desk preset)")
    s.add_argument("--intensity24", type=float, help="controller intensity, 2.4 GHz")
    s.add_argument("--intensity5", type=float, help="controller intensity, 5 GHz")
    s.add_argument("--calibration", help="calibration JSON supplying intensities not given explicitly")
    s.add_argument("--survey", action="store_true", help="simulate the offline survey instead")
    s.add_argument("--dwell", type=int, default=300, help="survey dwell per landmark, s")
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fingerprint", help="build a fingerprint db from survey feeds")
    f.add_argument("--run", help="survey run directory (replaces the four inputs below)")
    f.add_argument("--feeds", help="feed file or directory of feed files")
    f.add_argument("--visits", help="landmark visits CSV (client_id,building,floor,index,enter_ms,exit_ms)")
    f.add_argument("--aps", help="AP directory CSV")
    f.add_argument("--landmarks", help="landmark table CSV")
    f.add_argument("--band", action="append", help="restrict to a band (repeatable)")
    f.add_argument("--duration", type=float, default=300.0, help="offline window per landmark, s")
    f.add_argument("--out", required=True, help="output db (JSON)")
    f.set_defaults(func=cmd_fingerprint)

    e = sub.add_parser("evaluate", help="score a run against a fingerprint db")
    e.add_argument("--run", required=True)
    e.add_argument("--db", required=True)
    e.add_argument("--out", help="report directory (default RUN/reports)")
    e.add_argument("--band", action="append")
    e.add_argument("--heuristic", action="append", choices=[h.value for h in Heuristic])
    e.add_argument("--filter", action="append", choices=[c.value for c in ClassFilter])
    e.add_argument("--window", type=float, default=40.0, help="online window, s")
    e.add_argument("--hop", type=float, default=5.0, help="window hop, s")
    e.add_argument("--aggregate", choices=("mean", "latest"), default="mean")
    e.add_argument("--scope", choices=[m.value for m in MatchScope], default=MatchScope.SHORTLIST.value)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("classify", help="append the frame class to every record of a feed archive")
    c.add_argument("input", help="feed archive, or - for stdin")
    c.add_argument("-o", "--output", help="output CSV (default stdout)")
    c.add_argument("--probe-rates", type=float, nargs="+", help="probe response rates, Mbps")
    c.add_argument("--strict", action="store_true", help="fail when any line is malformed")
    c.set_defaults(func=cmd_classify)

    k = sub.add_parser("calibrate", help="fit controller intensity to target mismatch rates")
    k.add_argument("--seeds", type=int, nargs="+", default=[1000, 1001, 1002])
    k.add_argument("--grid", nargs="+", help="intensities to try")
    k.add_argument("--out", required=True, help="calibration JSON")
    k.set_defaults(func=cmd_calibrate)

    v = sub.add_parser("serve", help="run the feed listener and query API")
    v.add_argument("--config", help="service config JSON; flags below override it")
    v.add_argument("--feed-host")
    v.add_argument("--feed-port", type=int)
    v.add_argument("--api-host")
    v.add_argument("--api-port", type=int)
    v.add_argument("--db", help="fingerprint db path")
    v.add_argument("--aps", help="AP directory CSV (default: directory stored in the db)")
    v.add_argument("--window", type=float, help="online window, s")
    v.add_argument("--heuristic", choices=[h.value for h in Heuristic])
    v.add_argument("--band", help="default band for queries")
    v.add_argument("--max-age", type=int)
    v.add_argument("--min-rssi", type=int)
    v.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    v.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except CliError as exc:
        print(f"rtlsloc: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"rtlsloc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
