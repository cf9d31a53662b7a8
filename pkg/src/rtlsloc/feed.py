"""RTLS data feed records: parsing, filtering, frame classification and dedupe.

Wire format, one record per line::

    timestamp_ms,client_id_hex40,age_s,channel,ap_mac,assoc_char,data_rate_mbps,rssi_dbm

Archives may also be stored as JSON lines carrying the same field names.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .model import Band, band_for_channel

DEFAULT_MAX_AGE_S = 15
DEFAULT_MIN_RSSI_DBM = -72
DEFAULT_PROBE_RATES = frozenset({1.0, 6.0, 24.0})

# 802.11g rate set (Mbps) as reported in RTLS feeds.
RATES_80211G = (1.0, 2.0, 5.5, 6.0, 9.0, 11.0, 12.0, 18.0, 24.0, 36.0, 48.0, 54.0)

FIELDS = ("timestamp", "client_id", "age", "channel", "ap_id", "assoc", "data_rate", "rssi")

_HEX40 = re.compile(r"[0-9a-fA-F]{40}\Z")
_MAC = re.compile(r"[0-9a-fA-F]{2}(?::[0-9a-fA-F]{2}){5}\Z")


class FeedError(ValueError):
    """Base class for feed-level failures."""


class FeedParseError(FeedError):
    def __init__(self, field: str, offset: int, message: str):
        super().__init__(f"field {field!r} at byte {offset}: {message}")
        self.field = field
        self.offset = offset


class FeedValidationError(FeedError):
    def __init__(self, field: str, message: str):
        super().__init__(f"field {field!r}: {message}")
        self.field = field


class Assoc(str, enum.Enum):
    ASSOCIATED = "A"
    UNASSOCIATED = "U"


class FrameClass(str, enum.Enum):
    SCANNING = "Scanning"
    NON_SCANNING = "NonScanning"


@dataclass(frozen=True)
class RtlsRecord:
    """One per-client report sent by one AP."""

    timestamp: int  # epoch ms
    client_id: str  # 40 hex chars, SHA-1 of the client MAC
    age: int  # seconds since the client was last heard
    channel: int
    ap_id: str  # lowercase colon-separated MAC
    assoc: Assoc
    data_rate: float  # Mbps
    rssi: int  # dBm

    @property
    def band(self) -> Band:
        return band_for_channel(self.channel)

    @property
    def observed_at(self) -> int:
        """Epoch ms at which the AP last heard the client."""
        return self.timestamp - self.age * 1000

    def validate(self) -> "RtlsRecord":
        if self.age < 0:
            raise FeedValidationError("age", f"must be >= 0, got {self.age}")
        if not -100 <= self.rssi <= 0:
            raise FeedValidationError("rssi", f"must be in [-100, 0], got {self.rssi}")
        if not self.data_rate > 0:
            raise FeedValidationError("data_rate", f"must be > 0, got {self.data_rate}")
        try:
            band_for_channel(self.channel)
        except ValueError as exc:
            raise FeedValidationError("channel", str(exc)) from None
        if not _HEX40.match(self.client_id):
            raise FeedValidationError("client_id", "expected 40 hex characters")
        if not _MAC.match(self.ap_id):
            raise FeedValidationError("ap_id", "expected colon-separated MAC")
        return self


def _fmt_rate(rate: float) -> str:
    return repr(float(rate))


def serialize_record(r: RtlsRecord) -> str:
    """Render a record as one feed line (no trailing newline)."""
    return (
        f"{r.timestamp},{r.client_id},{r.age},{r.channel},{r.ap_id},"
        f"{r.assoc.value},{_fmt_rate(r.data_rate)},{r.rssi}"
    )


def parse_feed_line(line: str) -> RtlsRecord:
    """Parse one feed line into a validated :class:`RtlsRecord`.

    Raises FeedParseError (with field name and byte offset) for fields that
    cannot be decoded and FeedValidationError for values out of range.
    """
    text = line.rstrip("\r\n")
    parts = text.split(",")
    if len(parts) != len(FIELDS):
        # Point at the first missing or surplus field.
        idx = min(len(parts), len(FIELDS) - 1)
        offset = len(",".join(parts[:idx])) + (1 if idx else 0)
        name = FIELDS[idx] if len(parts) < len(FIELDS) else "<extra>"
        raise FeedParseError(name, min(offset, len(text.encode())), f"expected {len(FIELDS)} fields, got {len(parts)}")

    offsets = []
    pos = 0
    for p in parts:
        offsets.append(pos)
        pos += len(p.encode()) + 1

    def fail(i: int, msg: str) -> FeedParseError:
        return FeedParseError(FIELDS[i], offsets[i], msg)

    ts_s, cid, age_s, ch_s, mac, assoc_s, rate_s, rssi_s = (p.strip() for p in parts)
    try:
        timestamp = int(ts_s)
    except ValueError:
        raise fail(0, f"not an integer: {ts_s!r}") from None
    if not _HEX40.match(cid):
        raise fail(1, "expected 40 hex characters")
    try:
        age = int(age_s)
    except ValueError:
        raise fail(2, f"not an integer: {age_s!r}") from None
    try:
        channel = int(ch_s)
    except ValueError:
        raise fail(3, f"not an integer: {ch_s!r}") from None
    if not _MAC.match(mac):
        raise fail(4, f"not a MAC address: {mac!r}")
    try:
        assoc = Assoc(assoc_s.upper())
    except ValueError:
        raise fail(5, f"expected A or U, got {assoc_s!r}") from None
    try:
        data_rate = float(rate_s)
    except ValueError:
        raise fail(6, f"not a number: {rate_s!r}") from None
    try:
        rssi = int(rssi_s)
    except ValueError:
        raise fail(7, f"not an integer: {rssi_s!r}") from None

    rec = RtlsRecord(timestamp, cid.lower(), age, channel, mac.lower(), assoc, data_rate, rssi)
    return rec.validate()


def record_to_json(r: RtlsRecord) -> dict:
    return {
        "timestamp": r.timestamp,
        "client_id": r.client_id,
        "age": r.age,
        "channel": r.channel,
        "ap_id": r.ap_id,
        "assoc": r.assoc.value,
        "data_rate": r.data_rate,
        "rssi": r.rssi,
    }


def record_from_json(obj: dict) -> RtlsRecord:
    try:
        rec = RtlsRecord(
            int(obj["timestamp"]),
            str(obj["client_id"]).lower(),
            int(obj["age"]),
            int(obj["channel"]),
            str(obj["ap_id"]).lower(),
            Assoc(obj["assoc"]),
            float(obj["data_rate"]),
            int(obj["rssi"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FeedValidationError("<object>", f"bad record object: {exc}") from None
    return rec.validate()


def iter_lines(lines: Iterable[str], errors: list | None = None) -> Iterator[RtlsRecord]:
    """Parse feed lines, skipping blanks and ``#`` comments.

    Malformed lines raise unless ``errors`` is given, in which case
    ``(lineno, FeedError)`` pairs are appended and parsing continues.
    """
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            if s.startswith("{"):
                yield record_from_json(json.loads(s))
            else:
                yield parse_feed_line(s)
        except (FeedError, json.JSONDecodeError) as exc:
            if errors is None:
                raise
            errors.append((lineno, exc))


def read_feed(path: str | Path, errors: list | None = None) -> list[RtlsRecord]:
    """Read a feed archive (CSV lines or JSON lines, detected per line)."""
    with open(path, encoding="utf-8") as fh:
        return list(iter_lines(fh, errors))


def write_feed(path: str | Path, records: Iterable[RtlsRecord], fmt: str = "csv") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            if fmt == "jsonl":
                fh.write(json.dumps(record_to_json(r), sort_keys=True))
            else:
                fh.write(serialize_record(r))
            fh.write("\n")


def filter_record(r: RtlsRecord, max_age: int = DEFAULT_MAX_AGE_S, min_rssi: int = DEFAULT_MIN_RSSI_DBM) -> bool:
    """True when the record is fresh and strong enough to keep (both bounds inclusive)."""
    return r.age <= max_age and r.rssi >= min_rssi


def filter_records(
    records: Iterable[RtlsRecord], max_age: int = DEFAULT_MAX_AGE_S, min_rssi: int = DEFAULT_MIN_RSSI_DBM
) -> list[RtlsRecord]:
    return [r for r in records if filter_record(r, max_age, min_rssi)]


def classify_record(r: RtlsRecord, probe_rates: frozenset[float] | set[float] = DEFAULT_PROBE_RATES) -> FrameClass:
    """Infer whether a report came from probe-request (scan) traffic.

    Only unassociated reports at a configured probe-response rate count as
    scanning. The association AP's own reports are always NonScanning, even
    at a probe rate: that case is ambiguous and deliberately left misread.
    """
    if r.assoc is Assoc.UNASSOCIATED and r.data_rate in probe_rates:
        return FrameClass.SCANNING
    return FrameClass.NON_SCANNING


def classify_all(records: Iterable[RtlsRecord], probe_rates=DEFAULT_PROBE_RATES) -> list[tuple[RtlsRecord, FrameClass]]:
    return [(r, classify_record(r, probe_rates)) for r in records]


def dedupe_latest(records: Sequence[RtlsRecord]) -> list[RtlsRecord]:
    """Keep the freshest record per (client_id, ap_id, band).

    Freshest means smallest age, then largest timestamp, then first seen.
    Output keeps the input order of the surviving records.
    """
    best: dict[tuple[str, str, Band], int] = {}
    for i, r in enumerate(records):
        key = (r.client_id, r.ap_id, r.band)
        j = best.get(key)
        if j is None:
            best[key] = i
            continue
        cur = records[j]
        if r.age < cur.age or (r.age == cur.age and r.timestamp > cur.timestamp):
            best[key] = i
    return [records[i] for i in sorted(best.values())]


def dedupe_reports(records: Sequence[RtlsRecord]) -> list[RtlsRecord]:
    """Collapse repeated reports of one reporting tick.

    ``dedupe_latest`` is applied per timestamp, so a re-sent datagram
    contributes once while reports from different ticks all survive.
    """
    by_ts: dict[int, list[RtlsRecord]] = {}
    for r in records:
        by_ts.setdefault(r.timestamp, []).append(r)
    keep = set()
    for group in by_ts.values():
        keep.update(id(r) for r in dedupe_latest(group))
    return [r for r in records if id(r) in keep]
