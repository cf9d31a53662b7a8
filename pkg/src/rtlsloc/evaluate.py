"""Measurement suite: cardinality mismatch, inter-scan statistics and
per-cardinality localization errors over (band x heuristic x class filter) cells.

Windowing: for every client and band an online window of ``window_s`` seconds
ends at each evaluation tick (every ``hop_s``). A window's truth landmark is
the one whose visit covers the whole window; windows that straddle a
landmark change, or fall outside any visit, are counted as skipped.
"""

from __future__ import annotations

import bisect
import csv
import enum
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .feed import Assoc, FrameClass, RtlsRecord, classify_record, dedupe_latest, dedupe_reports, filter_record
from .fingerprint import ClassFilter, FingerprintDb, OfflineFingerprint, OnlineFingerprint
from .localizer import Heuristic, HeuristicConfig, LocalizationEstimate, localize_with_heuristic
from .model import ApDirectory, Band, LandmarkId

log = logging.getLogger(__name__)

PERCENTILES = (50, 75, 80, 85, 90)
DEFAULT_HOP_S = 5.0
DEFAULT_WINDOW_S = 40.0
DEFAULT_GUARD_S = 5.0  # one RTLS reporting period
SCAN_CLUSTER_S = 2.0


class Marker(str, enum.Enum):
    FLOOR_ERROR = "floor_error"
    SKIPPED = "skipped"


# -- truth ------------------------------------------------------------------


@dataclass(frozen=True)
class TruthVisit:
    client_id: str
    landmark: LandmarkId
    enter_ms: int
    exit_ms: int


class TruthLog:
    """Per-client landmark visits, queryable by time window."""

    def __init__(self, visits: Iterable[TruthVisit]):
        self._by_client: dict[str, list[TruthVisit]] = defaultdict(list)
        for v in visits:
            self._by_client[v.client_id].append(v)
        self._starts = {}
        for c, vs in self._by_client.items():
            vs.sort(key=lambda v: v.enter_ms)
            self._starts[c] = [v.enter_ms for v in vs]

    def clients(self) -> list[str]:
        return sorted(self._by_client)

    def visits(self, client_id: str) -> list[TruthVisit]:
        return list(self._by_client.get(client_id, ()))

    def at(self, client_id: str, t_ms: int) -> TruthVisit | None:
        starts = self._starts.get(client_id)
        if not starts:
            return None
        i = bisect.bisect_right(starts, t_ms) - 1
        if i < 0:
            return None
        v = self._by_client[client_id][i]
        return v if v.enter_ms <= t_ms < v.exit_ms else None

    def landmark_for_window(self, client_id: str, start_ms: int, end_ms: int, guard_ms: int = 0) -> LandmarkId | None:
        """Landmark covering the window midpoint, or None if the window
        straddles a landmark change or has no truth.

        ``guard_ms`` widens the window backwards: a report can average frames
        from up to one reporting period before its timestamp.
        """
        v = self.at(client_id, (start_ms + end_ms) // 2)
        if v is None or start_ms - guard_ms < v.enter_ms or end_ms > v.exit_ms:
            return None
        return v.landmark

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_client.values())


def read_truth(path: str | Path, landmarks: dict[tuple[str, int, int], LandmarkId] | None = None) -> TruthLog:
    """Read ``client_id,building,floor,index,enter_ms,exit_ms`` rows.

    Positions come from ``landmarks`` when given, otherwise they are unknown (0, 0).
    """
    visits = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "client_id" or row[0].startswith("#"):
                continue
            cid, b, f, i, enter, exit_ = row
            key = (b, int(f), int(i))
            lm = landmarks[key] if landmarks else LandmarkId(b, int(f), int(i), 0.0, 0.0)
            visits.append(TruthVisit(cid, lm, int(enter), int(exit_)))
    return TruthLog(visits)


def write_truth(path: str | Path, rows: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("client_id,building,floor,index,enter_ms,exit_ms\n")
        for r in rows:
            lm = r.landmark
            fh.write(f"{r.client_id},{lm.building},{lm.floor},{lm.index},{r.enter_ms},{r.exit_ms}\n")


# -- primitive metrics ------------------------------------------------------


def same_floor_error(est: LocalizationEstimate | LandmarkId, truth: LandmarkId | None) -> float | Marker:
    """Metres between predicted and true landmark, or a marker for wrong floor / no truth."""
    if truth is None:
        return Marker.SKIPPED
    pred = est.landmark if isinstance(est, LocalizationEstimate) else est
    if pred.building != truth.building or pred.floor != truth.floor:
        return Marker.FLOOR_ERROR
    return math.hypot(pred.x - truth.x, pred.y - truth.y)


def cardinality_mismatch(offline: OfflineFingerprint, online: OnlineFingerprint) -> bool:
    """True iff the two fingerprints are built from different AP sets."""
    return set(offline.entries) != set(online.entries)


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    if not values:
        raise ValueError("no values")
    if not 0 < pct <= 100:
        raise ValueError("percentile must be in (0, 100]")
    s = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(s)))
    return s[rank - 1]


# -- inter-scan -------------------------------------------------------------


@dataclass
class ScanStats:
    state: str
    gaps_s: list[float]
    clients: int
    excluded: list[str] = field(default_factory=list)

    @property
    def median(self) -> float | None:
        return nearest_rank(self.gaps_s, 50) if self.gaps_s else None

    @property
    def p90(self) -> float | None:
        return nearest_rank(self.gaps_s, 90) if self.gaps_s else None


def scan_instants(records: Iterable[RtlsRecord], probe_rates=None, cluster_s: float = SCAN_CLUSTER_S) -> dict[str, list[int]]:
    """Per-client scan burst times (ms) recovered from Scanning-class records.

    A record's observation instant is ``timestamp - age``; instants closer
    than ``cluster_s`` merge into one burst.
    """
    kw = {} if probe_rates is None else {"probe_rates": probe_rates}
    raw: dict[str, list[int]] = defaultdict(list)
    for r in records:
        if classify_record(r, **kw) is FrameClass.SCANNING:
            raw[r.client_id].append(r.observed_at)
    out = {}
    gap_ms = int(cluster_s * 1000)
    for cid, ts in raw.items():
        ts.sort()
        bursts = [ts[0]]
        last = ts[0]
        for t in ts[1:]:
            if t - last > gap_ms:
                bursts.append(t)
            last = t
        out[cid] = bursts
    return out


def inter_scan_stats(
    records: Iterable[RtlsRecord],
    states: dict[str, str],
    cluster_s: float = SCAN_CLUSTER_S,
) -> dict[str, ScanStats]:
    """Gaps between consecutive scan bursts, pooled per client state.

    ``states`` maps client id to a state label; clients missing from it are
    pooled under ``"unknown"``. Clients with fewer than two bursts are
    excluded and listed in the result.
    """
    bursts = scan_instants(records, cluster_s=cluster_s)
    out: dict[str, ScanStats] = {}
    for cid in sorted(set(bursts) | set(states)):
        label = states.get(cid, "unknown")
        st = out.setdefault(label, ScanStats(label, [], 0))
        b = bursts.get(cid, [])
        if len(b) < 2:
            st.excluded.append(cid)
            continue
        st.clients += 1
        st.gaps_s.extend((b2 - b1) / 1000.0 for b1, b2 in zip(b, b[1:]))
    return out


# -- windows ----------------------------------------------------------------


@dataclass(frozen=True)
class Window:
    client_id: str
    band: Band
    start_ms: int
    end_ms: int
    truth: LandmarkId | None
    assoc_ap: str | None


class FeedIndex:
    """Feed records indexed by (client, band) for fast window extraction.

    The association AP is taken from Associated records before filtering,
    since a sticky association report may be too old to pass the age filter.
    """

    def __init__(
        self,
        records: Sequence[RtlsRecord],
        max_age: int = 15,
        min_rssi: int = -72,
        probe_rates=None,
    ):
        kw = {} if probe_rates is None else {"probe_rates": probe_rates}
        self._kept: dict[tuple[str, Band], list[tuple[RtlsRecord, FrameClass]]] = defaultdict(list)
        self._assoc: dict[str, list[tuple[int, str]]] = defaultdict(list)
        for r in records:
            if r.assoc is Assoc.ASSOCIATED:
                self._assoc[r.client_id].append((r.timestamp, r.ap_id))
            if filter_record(r, max_age, min_rssi):
                self._kept[(r.client_id, r.band)].append((r, classify_record(r, **kw)))
        for v in self._kept.values():
            v.sort(key=lambda rc: rc[0].timestamp)
        for v in self._assoc.values():
            v.sort()
        self._stamps = {k: [rc[0].timestamp for rc in v] for k, v in self._kept.items()}
        self._assoc_stamps = {k: [t for t, _ in v] for k, v in self._assoc.items()}
        all_ts = [r.timestamp for r in records]
        self.first_ms = min(all_ts, default=0)
        self.last_ms = max(all_ts, default=0)

    def clients(self) -> list[str]:
        return sorted({c for c, _ in self._kept} | set(self._assoc))

    def window_records(self, client: str, band: Band, start_ms: int, end_ms: int) -> list[tuple[RtlsRecord, FrameClass]]:
        st = self._stamps.get((client, band))
        if not st:
            return []
        lo = bisect.bisect_right(st, start_ms)
        hi = bisect.bisect_right(st, end_ms)
        return self._kept[(client, band)][lo:hi]

    def assoc_ap(self, client: str, start_ms: int, end_ms: int) -> str | None:
        st = self._assoc_stamps.get(client)
        if not st:
            return None
        i = bisect.bisect_right(st, end_ms) - 1
        if i < 0 or st[i] <= start_ms:
            return None
        return self._assoc[client][i][1]


def online_fingerprint(
    pairs: Sequence[tuple[RtlsRecord, FrameClass]],
    client: str,
    band: Band,
    start_ms: int,
    end_ms: int,
    class_filter: ClassFilter,
    aggregate: str = "mean",
) -> OnlineFingerprint | None:
    """Online fingerprint from window records admitted by ``class_filter``.

    ``aggregate="latest"`` keeps each AP's newest report; ``"mean"`` averages
    the AP's reports across the window's ticks, one per tick. Class selection happens first, so
    a ScanOnly window is not emptied by a newer non-scanning report.
    """
    chosen = [r for r, cls in pairs if class_filter.admits(cls)]
    if not chosen:
        return None
    if aggregate == "latest":
        entries = {r.ap_id: float(r.rssi) for r in sorted(dedupe_latest(chosen), key=lambda r: r.ap_id)}
    else:
        per_ap: dict[str, list[int]] = defaultdict(list)
        for r in dedupe_reports(chosen):
            per_ap[r.ap_id].append(r.rssi)
        entries = {ap: sum(v) / len(v) for ap, v in sorted(per_ap.items())}
    return OnlineFingerprint(client, band, entries, start_ms, end_ms)


def iter_windows(
    index: FeedIndex,
    truth: TruthLog,
    band: Band,
    window_s: float = DEFAULT_WINDOW_S,
    hop_s: float = DEFAULT_HOP_S,
    clients: Iterable[str] | None = None,
    guard_s: float = DEFAULT_GUARD_S,
):
    """Yield (Window, window records) for every tick with at least one filtered record."""
    w_ms = int(window_s * 1000)
    hop_ms = int(hop_s * 1000)
    guard_ms = int(guard_s * 1000)
    ticks = range(index.first_ms, index.last_ms + 1, hop_ms)
    for client in sorted(clients if clients is not None else index.clients()):
        for end in ticks:
            start = end - w_ms
            pairs = index.window_records(client, band, start, end)
            if not pairs:
                continue
            yield (
                Window(client, band, start, end, truth.landmark_for_window(client, start, end, guard_ms),
                       index.assoc_ap(client, start, end)),
                pairs,
            )


# -- reports ----------------------------------------------------------------


@dataclass
class CardinalityRow:
    cardinality: int | str  # "all" for the aggregate row
    percentiles: dict[int, float | None]
    different_floor_rate: float
    same_floor_share: float
    skipped_share: float
    sample_count: int


@dataclass
class ErrorReport:
    band: Band
    heuristic: Heuristic
    class_filter: ClassFilter
    rows: list[CardinalityRow]
    samples: list[tuple[int, float | Marker]]  # (cardinality, metres or marker)
    fallbacks: int = 0

    def row(self, cardinality: int | str) -> CardinalityRow | None:
        for r in self.rows:
            if r.cardinality == cardinality:
                return r
        return None


@dataclass
class MismatchReport:
    band: Band
    class_filter: ClassFilter
    total: int
    mismatches: int
    per_cardinality: dict[int, tuple[int, int]]  # offline cardinality -> (total, mismatches)
    no_offline: int = 0  # windows whose truth landmark has no fingerprint in this band

    @property
    def rate(self) -> float:
        return 100.0 * self.mismatches / self.total if self.total else 0.0


def _summarise(card: int | str, values: list[float | Marker]) -> CardinalityRow:
    n = len(values)
    metres = [v for v in values if not isinstance(v, Marker)]
    floor_err = sum(1 for v in values if v is Marker.FLOOR_ERROR)
    skipped = sum(1 for v in values if v is Marker.SKIPPED)
    pct = {p: (nearest_rank(metres, p) if metres else None) for p in PERCENTILES}
    if n == 0:
        return CardinalityRow(card, pct, 0.0, 0.0, 0.0, 0)
    return CardinalityRow(card, pct, 100.0 * floor_err / n, 100.0 * len(metres) / n, 100.0 * skipped / n, n)


def summarise_samples(samples: list[tuple[int, float | Marker]]) -> list[CardinalityRow]:
    by_card: dict[int, list] = defaultdict(list)
    for c, v in samples:
        by_card[c].append(v)
    rows = [_summarise(c, by_card[c]) for c in sorted(by_card)]
    rows.append(_summarise("all", [v for _, v in samples]))
    return rows


@dataclass(frozen=True)
class Cell:
    band: Band
    heuristic: Heuristic
    class_filter: ClassFilter


def default_matrix(bands: Iterable[Band] = tuple(Band)) -> list[Cell]:
    return [Cell(b, h, f) for b in bands for h in Heuristic for f in ClassFilter]


@dataclass
class EvalConfig:
    window_s: float = DEFAULT_WINDOW_S
    hop_s: float = DEFAULT_HOP_S
    guard_s: float = DEFAULT_GUARD_S
    max_age: int = 15
    min_rssi: int = -72
    sentinel: float = -90.0
    mismatch_filter: ClassFilter = ClassFilter.BOTH
    aggregate: str = "mean"  # or "latest"
    heuristic_cfg: HeuristicConfig = field(default_factory=HeuristicConfig)


def evaluate_cell(
    cell: Cell,
    index: FeedIndex,
    truth: TruthLog,
    db: FingerprintDb,
    directory: ApDirectory,
    cfg: EvalConfig = EvalConfig(),
) -> ErrorReport:
    hcfg = HeuristicConfig(cell.heuristic, cfg.sentinel, cfg.heuristic_cfg.scope)
    samples: list[tuple[int, float | Marker]] = []
    fallbacks = 0
    if db.fingerprints(cell.band):
        for win, pairs in iter_windows(index, truth, cell.band, cfg.window_s, cfg.hop_s, guard_s=cfg.guard_s):
            online = online_fingerprint(
                pairs, win.client_id, cell.band, win.start_ms, win.end_ms, cell.class_filter, cfg.aggregate
            )
            if online is None:
                continue
            card = len(online.entries)
            if win.truth is None:
                samples.append((card, Marker.SKIPPED))
                continue
            est = localize_with_heuristic(online, db, directory, win.assoc_ap, hcfg)
            fallbacks += est.fallback
            samples.append((card, same_floor_error(est, win.truth)))
    return ErrorReport(cell.band, cell.heuristic, cell.class_filter, summarise_samples(samples), samples, fallbacks)


def mismatch_report(
    band: Band,
    index: FeedIndex,
    truth: TruthLog,
    db: FingerprintDb,
    cfg: EvalConfig = EvalConfig(),
    class_filter: ClassFilter | None = None,
) -> MismatchReport:
    """Compare each truth-joined online window with its landmark's offline fingerprint."""
    flt = class_filter or cfg.mismatch_filter
    total = mism = no_off = 0
    per: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    for win, pairs in iter_windows(index, truth, band, cfg.window_s, cfg.hop_s, guard_s=cfg.guard_s):
        if win.truth is None:
            continue
        online = online_fingerprint(pairs, win.client_id, band, win.start_ms, win.end_ms, flt, cfg.aggregate)
        if online is None:
            continue
        off = db.get(win.truth, band)
        if off is None:
            no_off += 1
            continue
        m = cardinality_mismatch(off, online)
        total += 1
        mism += m
        slot = per[len(off.entries)]
        slot[0] += 1
        slot[1] += m
    return MismatchReport(band, flt, total, mism, {k: tuple(v) for k, v in sorted(per.items())}, no_off)


def online_cardinalities(index: FeedIndex, truth: TruthLog, band: Band, cfg: EvalConfig = EvalConfig(),
                         class_filter: ClassFilter = ClassFilter.BOTH) -> list[int]:
    out = []
    for win, pairs in iter_windows(index, truth, band, cfg.window_s, cfg.hop_s, guard_s=cfg.guard_s):
        online = online_fingerprint(pairs, win.client_id, band, win.start_ms, win.end_ms, class_filter, cfg.aggregate)
        if online is not None:
            out.append(len(online.entries))
    return out


def paired_cardinalities(index: FeedIndex, truth: TruthLog, db: FingerprintDb, band: Band,
                         cfg: EvalConfig = EvalConfig()) -> list[tuple[int, int]]:
    """(online, offline) cardinality for every truth-joined window with an offline fingerprint."""
    out = []
    for win, pairs in iter_windows(index, truth, band, cfg.window_s, cfg.hop_s, guard_s=cfg.guard_s):
        if win.truth is None:
            continue
        off = db.get(win.truth, band)
        online = online_fingerprint(pairs, win.client_id, band, win.start_ms, win.end_ms, ClassFilter.BOTH, cfg.aggregate)
        if online is not None and off is not None:
            out.append((len(online.entries), len(off.entries)))
    return out


def stochastically_dominated(a: Sequence[float], b: Sequence[float]) -> bool:
    """True when P(a >= x) <= P(b >= x) for every threshold x (first-order dominance of b over a)."""
    if not a or not b:
        return False
    for x in sorted(set(a) | set(b)):
        if sum(v >= x for v in a) / len(a) > sum(v >= x for v in b) / len(b) + 1e-12:
            return False
    return True


def build_report(
    records: Sequence[RtlsRecord],
    truth: TruthLog,
    db: FingerprintDb,
    directory: ApDirectory | None = None,
    matrix: Iterable[Cell] | None = None,
    cfg: EvalConfig = EvalConfig(),
) -> tuple[list[ErrorReport], list[MismatchReport]]:
    """Run every cell of ``matrix`` plus one mismatch report per band."""
    directory = directory if directory is not None else db.directory
    index = FeedIndex(records, cfg.max_age, cfg.min_rssi)
    cells = list(matrix) if matrix is not None else default_matrix(db.bands() or tuple(Band))
    errors = [evaluate_cell(c, index, truth, db, directory, cfg) for c in cells]
    bands = sorted({c.band for c in cells}, key=lambda b: b.value)
    mismatches = [mismatch_report(b, index, truth, db, cfg) for b in bands]
    return errors, mismatches


# -- output -----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


ERROR_HEADER = (
    ["band", "heuristic", "class_filter", "cardinality"]
    + [f"p{p}_m" for p in PERCENTILES]
    + ["different_floor_rate", "same_floor_share", "skipped_share", "sample_count"]
)


def write_error_reports(path: str | Path, reports: Iterable[ErrorReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ERROR_HEADER)
        for rep in reports:
            for row in rep.rows:
                w.writerow(
                    [rep.band.value, rep.heuristic.value, rep.class_filter.value, row.cardinality]
                    + [_fmt(row.percentiles[p]) for p in PERCENTILES]
                    + [_fmt(row.different_floor_rate), _fmt(row.same_floor_share), _fmt(row.skipped_share),
                       row.sample_count]
                )


def write_mismatch_reports(path: str | Path, reports: Iterable[MismatchReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["band", "class_filter", "offline_cardinality", "total", "mismatches", "rate"])
        for rep in reports:
            for card, (n, m) in rep.per_cardinality.items():
                w.writerow([rep.band.value, rep.class_filter.value, card, n, m, _fmt(100.0 * m / n if n else 0.0)])
            w.writerow([rep.band.value, rep.class_filter.value, "all", rep.total, rep.mismatches, _fmt(rep.rate)])


def write_cdf_samples(directory: str | Path, reports: Iterable[ErrorReport]) -> list[Path]:
    """One file per cell: ``cardinality,outcome`` with metres or a marker."""
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for rep in reports:
        p = out_dir / f"cdf_{rep.band.value}_{rep.heuristic.value}_{rep.class_filter.value}.csv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write("cardinality,outcome\n")
            for card, v in rep.samples:
                fh.write(f"{card},{v.value if isinstance(v, Marker) else f'{v:.4f}'}\n")
        paths.append(p)
    return paths


def write_scan_stats(path: str | Path, stats: dict[str, ScanStats]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "clients", "gaps", "median_s", "p90_s", "excluded"])
        for label in sorted(stats):
            s = stats[label]
            w.writerow([label, s.clients, len(s.gaps_s), _fmt(s.median), _fmt(s.p90), " ".join(s.excluded)])
