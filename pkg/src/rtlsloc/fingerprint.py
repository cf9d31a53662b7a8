"""Offline fingerprint maps, online fingerprints and the fingerprint database."""

from __future__ import annotations

import enum
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .feed import FrameClass, RtlsRecord
from .model import ApDirectory, Band, LandmarkId

DB_FORMAT = "rtlsloc-fingerprint-db"
DB_VERSION = 1

DEFAULT_OFFLINE_DURATION_S = 300
DEFAULT_ONLINE_WINDOW_S = 40


class EmptyFingerprintError(ValueError):
    def __init__(self, landmark: LandmarkId, band: Band):
        super().__init__(f"no scanning records for landmark {landmark} in {band.value}")
        self.landmark = landmark
        self.band = band


class NoObservationError(LookupError):
    """No usable records for a client in the requested band and window."""


class FingerprintDbError(ValueError):
    pass


class ClassFilter(str, enum.Enum):
    SCAN_ONLY = "ScanOnly"
    NON_SCAN_ONLY = "NonScanOnly"
    BOTH = "Both"

    def admits(self, cls: FrameClass) -> bool:
        if self is ClassFilter.BOTH:
            return True
        if self is ClassFilter.SCAN_ONLY:
            return cls is FrameClass.SCANNING
        return cls is FrameClass.NON_SCANNING


@dataclass
class OfflineFingerprint:
    landmark: LandmarkId
    band: Band
    entries: dict[str, int]
    sample_count: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise EmptyFingerprintError(self.landmark, self.band)


@dataclass
class OnlineFingerprint:
    client_id: str
    band: Band
    entries: dict[str, float]
    window_start: int = 0
    window_end: int = 0

    def restricted(self, ap_ids: Iterable[str]) -> "OnlineFingerprint":
        keep = set(ap_ids)
        return OnlineFingerprint(
            self.client_id,
            self.band,
            {ap: v for ap, v in self.entries.items() if ap in keep},
            self.window_start,
            self.window_end,
        )


def cardinality(fp: OfflineFingerprint | OnlineFingerprint) -> int:
    """Number of distinct APs in the fingerprint."""
    return len(fp.entries)


def _round_mean(values: list[int]) -> int:
    # Half-up rounding in exact integer arithmetic.
    n = len(values)
    return (2 * sum(values) + n) // (2 * n)


def record_offline(
    records: Iterable[tuple[RtlsRecord, FrameClass]],
    landmark: LandmarkId,
    band: Band,
    duration: float = DEFAULT_OFFLINE_DURATION_S,
    start_ms: int | None = None,
) -> OfflineFingerprint:
    """Average the scanning reports heard at one landmark into a fingerprint.

    ``records`` are (record, class) pairs, already filtered. Only scanning
    records of ``band`` stamped in ``(start_ms, start_ms + duration]``
    contribute. A report stamped exactly at ``start_ms`` covers the period
    before arrival, so it is left out. Without ``start_ms`` the window opens
    just before the earliest scanning record.
    """
    pool = [r for r, cls in records if cls is FrameClass.SCANNING and r.band is band]
    if start_ms is None and pool:
        start_ms = min(r.timestamp for r in pool) - 1
    start_ms = start_ms or 0
    end_ms = start_ms + int(duration * 1000)
    per_ap: dict[str, list[int]] = defaultdict(list)
    for r in pool:
        if start_ms < r.timestamp <= end_ms:
            per_ap[r.ap_id].append(r.rssi)
    if not per_ap:
        raise EmptyFingerprintError(landmark, band)
    entries = {ap: _round_mean(v) for ap, v in sorted(per_ap.items())}
    counts = {ap: len(v) for ap, v in sorted(per_ap.items())}
    return OfflineFingerprint(landmark, band, entries, counts)


def online_contributors(
    records: Iterable[tuple[RtlsRecord, FrameClass]],
    client: str,
    band: Band,
    window: float = DEFAULT_ONLINE_WINDOW_S,
    class_filter: ClassFilter = ClassFilter.BOTH,
    end_ms: int | None = None,
) -> tuple[list[RtlsRecord], int, int]:
    """Select the records that feed an online fingerprint.

    The window is ``(end_ms - window, end_ms]``; ``end_ms`` defaults to the
    newest matching timestamp.
    """
    pool = [
        r for r, cls in records if r.client_id == client and r.band is band and class_filter.admits(cls)
    ]
    if end_ms is None:
        end_ms = max((r.timestamp for r in pool), default=0)
    start_ms = end_ms - int(window * 1000)
    chosen = [r for r in pool if start_ms < r.timestamp <= end_ms]
    return chosen, start_ms, end_ms


def assemble_online(
    records: Iterable[tuple[RtlsRecord, FrameClass]],
    client: str,
    band: Band,
    window: float = DEFAULT_ONLINE_WINDOW_S,
    class_filter: ClassFilter = ClassFilter.BOTH,
    end_ms: int | None = None,
) -> OnlineFingerprint:
    """Build the online fingerprint of ``client`` from deduped, filtered records.

    Entries are the mean RSSI per AP over records that match ``class_filter``
    inside the window. Raises NoObservationError when nothing matches.
    """
    chosen, start_ms, end_ms = online_contributors(records, client, band, window, class_filter, end_ms)
    if not chosen:
        raise NoObservationError(f"no {class_filter.value} observations for {client} in {band.value}")
    per_ap: dict[str, list[int]] = defaultdict(list)
    for r in chosen:
        per_ap[r.ap_id].append(r.rssi)
    entries = {ap: sum(v) / len(v) for ap, v in sorted(per_ap.items())}
    return OnlineFingerprint(client, band, entries, start_ms, end_ms)


class FingerprintDb:
    """Per-band offline fingerprints plus the AP directory they refer to.

    Treated as immutable once built; dense matrices for fast matching are
    computed lazily and cached.
    """

    def __init__(self, directory: ApDirectory, fingerprints: Iterable[OfflineFingerprint] = ()):
        self.directory = directory
        self._by_band: dict[Band, dict[LandmarkId, OfflineFingerprint]] = {b: {} for b in Band}
        self._dense: dict[tuple[Band, float], tuple] = {}
        for fp in fingerprints:
            self.add(fp)

    def add(self, fp: OfflineFingerprint) -> None:
        missing = [ap for ap in fp.entries if ap not in self.directory]
        if missing:
            raise FingerprintDbError(f"{fp.landmark} references APs missing from directory: {missing}")
        slot = self._by_band[fp.band]
        if fp.landmark in slot:
            raise FingerprintDbError(f"duplicate fingerprint for {fp.landmark} in {fp.band.value}")
        slot[fp.landmark] = fp
        self._dense.clear()

    def bands(self) -> list[Band]:
        return [b for b in Band if self._by_band[b]]

    def fingerprints(self, band: Band) -> list[OfflineFingerprint]:
        """Fingerprints of one band in (building, floor, index) order."""
        return sorted(self._by_band[band].values(), key=lambda fp: fp.landmark.key)

    def get(self, landmark: LandmarkId, band: Band) -> OfflineFingerprint | None:
        return self._by_band[band].get(landmark)

    def lookup(self, key: tuple[str, int, int], band: Band) -> OfflineFingerprint | None:
        for lm, fp in self._by_band[band].items():
            if lm.key == key:
                return fp
        return None

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_band.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FingerprintDb):
            return NotImplemented
        return self.directory == other.directory and self._by_band == other._by_band

    def dense(self, band: Band, sentinel: float):
        """Sentinel-completed matrix view of one band.

        Returns ``(landmarks, ap_index, matrix, floors)`` where ``matrix[i, j]``
        is the RSSI of AP ``j`` at landmark ``i`` or ``sentinel`` when absent.
        """
        key = (band, float(sentinel))
        if key not in self._dense:
            fps = self.fingerprints(band)
            ap_ids = self.directory.ids()
            index = {ap: j for j, ap in enumerate(ap_ids)}
            mat = np.full((len(fps), len(ap_ids)), float(sentinel))
            for i, fp in enumerate(fps):
                for ap, v in fp.entries.items():
                    mat[i, index[ap]] = v
            mat.setflags(write=False)
            floors = np.array([fp.landmark.floor for fp in fps], dtype=int)
            self._dense[key] = ([fp.landmark for fp in fps], index, mat, floors)
        return self._dense[key]


def build_db(
    directory: ApDirectory,
    classified: list[tuple[RtlsRecord, FrameClass]],
    visits: Iterable[tuple[LandmarkId, int, int]],
    bands: Iterable[Band] = tuple(Band),
    duration: float = DEFAULT_OFFLINE_DURATION_S,
) -> tuple[FingerprintDb, list[str]]:
    """Build a database from a survey feed and its (landmark, enter_ms, exit_ms) visits.

    Returns the database and a list of warnings for (landmark, band) pairs
    that produced no scanning records.
    """
    db = FingerprintDb(directory)
    warnings = []
    ordered = sorted(classified, key=lambda rc: rc[0].timestamp)
    stamps = np.array([r.timestamp for r, _ in ordered], dtype=np.int64)
    for lm, enter_ms, exit_ms in visits:
        lo = int(np.searchsorted(stamps, enter_ms, side="right"))
        hi = int(np.searchsorted(stamps, exit_ms, side="right"))
        chunk = ordered[lo:hi]
        span = min(duration, (exit_ms - enter_ms) / 1000.0)
        for band in bands:
            try:
                db.add(record_offline(chunk, lm, band, span, start_ms=enter_ms))
            except EmptyFingerprintError as exc:
                warnings.append(str(exc))
    return db, warnings


def _lm_to_json(lm: LandmarkId) -> dict:
    return {"building": lm.building, "floor": lm.floor, "index": lm.index, "x_m": lm.x, "y_m": lm.y}


def save_db(db: FingerprintDb, path: str | Path) -> None:
    """Write the database as a versioned JSON document (atomic replace)."""
    doc = {
        "format": DB_FORMAT,
        "version": DB_VERSION,
        "aps": db.directory.to_rows(),
        "fingerprints": [
            {
                "landmark": _lm_to_json(fp.landmark),
                "band": fp.band.value,
                "entries": fp.entries,
                "sample_count": fp.sample_count,
            }
            for band in Band
            for fp in db.fingerprints(band)
        ],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_db(path: str | Path) -> FingerprintDb:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FingerprintDbError(f"{path}: corrupt fingerprint db ({exc.msg} at char {exc.pos})") from None
    except UnicodeDecodeError as exc:
        raise FingerprintDbError(f"{path}: corrupt fingerprint db ({exc.reason})") from None
    if not isinstance(doc, dict) or doc.get("format") != DB_FORMAT:
        raise FingerprintDbError(f"{path}: not a fingerprint db")
    if doc.get("version") != DB_VERSION:
        raise FingerprintDbError(f"{path}: unsupported db version {doc.get('version')!r} (expected {DB_VERSION})")
    try:
        db = FingerprintDb(ApDirectory.from_rows(doc["aps"]))
        for row in doc["fingerprints"]:
            lm = row["landmark"]
            db.add(
                OfflineFingerprint(
                    LandmarkId(lm["building"], int(lm["floor"]), int(lm["index"]), float(lm["x_m"]), float(lm["y_m"])),
                    Band(row["band"]),
                    {ap: int(v) for ap, v in row["entries"].items()},
                    {ap: int(v) for ap, v in row.get("sample_count", {}).items()},
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FingerprintDbError):
            raise
        raise FingerprintDbError(f"{path}: malformed fingerprint db: {exc!r}") from None
    return db


def mean_cardinality(fps: Mapping[LandmarkId, OfflineFingerprint] | Iterable[OfflineFingerprint]) -> float:
    items = list(fps.values()) if isinstance(fps, Mapping) else list(fps)
    return float(np.mean([cardinality(fp) for fp in items])) if items else 0.0
