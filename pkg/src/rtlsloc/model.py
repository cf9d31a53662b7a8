"""Shared domain types: bands, landmarks and the AP directory."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

CHANNELS_24 = frozenset(range(1, 15))
CHANNELS_5 = frozenset(
    list(range(36, 65, 4)) + list(range(100, 145, 4)) + list(range(149, 166, 4))
)


class Band(str, enum.Enum):
    BAND24 = "Band24"
    BAND5 = "Band5"

    @property
    def label(self) -> str:
        return "2.4GHz" if self is Band.BAND24 else "5GHz"


def band_for_channel(channel: int) -> Band:
    """Map an 802.11 channel number to its band.

    Raises ValueError for channels outside the 2.4 GHz (1-14) and
    5 GHz (36-165) channel plans.
    """
    if channel in CHANNELS_24:
        return Band.BAND24
    if channel in CHANNELS_5:
        return Band.BAND5
    raise ValueError(f"unknown channel {channel}")


def parse_band(text: str) -> Band:
    t = text.strip().lower().replace(" ", "")
    if t in ("band24", "24", "2.4", "2.4ghz", "b24"):
        return Band.BAND24
    if t in ("band5", "5", "5ghz", "b5"):
        return Band.BAND5
    raise ValueError(f"unknown band {text!r}")


@dataclass(frozen=True)
class LandmarkId:
    """A calibrated location on a floor plan."""

    building: str
    floor: int
    index: int
    x: float = 0.0
    y: float = 0.0

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.building, self.floor, self.index)

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def __str__(self) -> str:
        return f"{self.building}/{self.floor}/{self.index}"


LANDMARK_HEADER = ["building", "floor", "index", "x_m", "y_m"]


def read_landmarks(path: str | Path) -> list[LandmarkId]:
    """Read a landmark table (`building,floor,index,x_m,y_m`, header optional)."""
    out = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if row == LANDMARK_HEADER:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                lm = LandmarkId(row[0], int(row[1]), int(row[2]), float(row[3]), float(row[4]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if lm.key in seen:
                raise ValueError(f"{path}:{lineno}: duplicate landmark {lm}")
            if lm.x < 0 or lm.y < 0:
                raise ValueError(f"{path}:{lineno}: negative position for {lm}")
            seen.add(lm.key)
            out.append(lm)
    return out


def write_landmarks(path: str | Path, landmarks: Iterable[LandmarkId]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LANDMARK_HEADER)
        for lm in landmarks:
            w.writerow([lm.building, lm.floor, lm.index, _num(lm.x), _num(lm.y)])


@dataclass(frozen=True)
class ApInfo:
    """Directory entry for one (dual-band) access point."""

    ap_id: str
    building: str
    floor: int
    x: float
    y: float
    channels: dict[Band, int] = field(default_factory=dict, hash=False)
    tx_power_dbm: float = 20.0


AP_HEADER = ["ap_id", "building", "floor", "x_m", "y_m", "channel_24", "channel_5", "tx_power_dbm"]


class ApDirectory:
    """Lookup table of AP identity to floor, position and radio configuration."""

    def __init__(self, aps: Iterable[ApInfo] = ()):
        self._aps: dict[str, ApInfo] = {}
        for ap in aps:
            if ap.ap_id in self._aps:
                raise ValueError(f"duplicate AP {ap.ap_id}")
            self._aps[ap.ap_id] = ap

    def __contains__(self, ap_id: object) -> bool:
        return ap_id in self._aps

    def __getitem__(self, ap_id: str) -> ApInfo:
        return self._aps[ap_id]

    def __iter__(self) -> Iterator[ApInfo]:
        return iter(self._aps.values())

    def __len__(self) -> int:
        return len(self._aps)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ApDirectory) and self._aps == other._aps

    def get(self, ap_id: str) -> ApInfo | None:
        return self._aps.get(ap_id)

    def floor_of(self, ap_id: str) -> int:
        return self._aps[ap_id].floor

    def ids(self) -> list[str]:
        return sorted(self._aps)

    def to_rows(self) -> list[dict]:
        return [
            {
                "ap_id": ap.ap_id,
                "building": ap.building,
                "floor": ap.floor,
                "x_m": ap.x,
                "y_m": ap.y,
                "channels": {b.value: c for b, c in sorted(ap.channels.items(), key=lambda kv: kv[0].value)},
                "tx_power_dbm": ap.tx_power_dbm,
            }
            for ap in sorted(self._aps.values(), key=lambda a: a.ap_id)
        ]

    @classmethod
    def from_rows(cls, rows: Iterable[dict]) -> "ApDirectory":
        return cls(
            ApInfo(
                ap_id=r["ap_id"],
                building=r["building"],
                floor=int(r["floor"]),
                x=float(r["x_m"]),
                y=float(r["y_m"]),
                channels={Band(b): int(c) for b, c in r.get("channels", {}).items()},
                tx_power_dbm=float(r.get("tx_power_dbm", 20.0)),
            )
            for r in rows
        )


def read_ap_directory(path: str | Path) -> ApDirectory:
    """Read the AP directory CSV written by :func:`write_ap_directory`."""
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_ap_directory(fh.read(), source=str(path))


def parse_ap_directory(text: str, source: str = "<string>") -> ApDirectory:
    aps = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or row[0].startswith("#") or row == AP_HEADER:
            continue
        if len(row) != len(AP_HEADER):
            raise ValueError(f"{source}:{lineno}: expected {len(AP_HEADER)} fields")
        channels = {}
        if row[5]:
            channels[Band.BAND24] = int(row[5])
        if row[6]:
            channels[Band.BAND5] = int(row[6])
        for band, ch in channels.items():
            if band_for_channel(ch) is not band:
                raise ValueError(f"{source}:{lineno}: channel {ch} not in {band.value}")
        aps.append(
            ApInfo(row[0].lower(), row[1], int(row[2]), float(row[3]), float(row[4]), channels, float(row[7]))
        )
    return ApDirectory(aps)


def write_ap_directory(path: str | Path, directory: ApDirectory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AP_HEADER)
        for ap in sorted(directory, key=lambda a: a.ap_id):
            w.writerow(
                [
                    ap.ap_id,
                    ap.building,
                    ap.floor,
                    _num(ap.x),
                    _num(ap.y),
                    ap.channels.get(Band.BAND24, ""),
                    ap.channels.get(Band.BAND5, ""),
                    _num(ap.tx_power_dbm),
                ]
            )


def _num(v: float) -> str:
    return repr(float(v))
