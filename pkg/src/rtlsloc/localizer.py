"""Nearest-landmark matching in signal space with floor-detection heuristics."""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .fingerprint import FingerprintDb, OfflineFingerprint, OnlineFingerprint
from .model import ApDirectory, Band, LandmarkId

DEFAULT_SENTINEL_DBM = -90.0


class Heuristic(str, enum.Enum):
    BASELINE = "Baseline"
    MAX_AP_COUNT = "MaxApCount"
    MAX_RSSI_FLOOR = "MaxRssiFloor"
    ASSOCIATION_FLOOR = "AssociationFloor"


class MatchScope(str, enum.Enum):
    """Which AP axes enter the distance once a floor has been selected.

    UNION      every AP in either fingerprint (same metric as Baseline)
    FLOOR      APs located on the selected floor
    SHORTLIST  only the online APs that survived the floor shortlist
    """

    UNION = "union"
    FLOOR = "floor"
    SHORTLIST = "shortlist"


class BandMismatchError(ValueError):
    pass


class NoMapError(LookupError):
    pass


class HeuristicInapplicableError(ValueError):
    pass


@dataclass(frozen=True)
class HeuristicConfig:
    heuristic: Heuristic = Heuristic.BASELINE
    missing_ap_sentinel: float = DEFAULT_SENTINEL_DBM
    scope: MatchScope = MatchScope.SHORTLIST

    def __post_init__(self):
        if not self.missing_ap_sentinel < -72:
            raise ValueError("missing_ap_sentinel must be below the -72 dBm filter floor")


@dataclass(frozen=True)
class LocalizationEstimate:
    client_id: str
    landmark: LandmarkId
    band: Band
    score: float  # dB, distance in signal space
    cardinality_used: int
    heuristic: Heuristic  # path that actually ran
    matched_ap_count: int
    requested: Heuristic = Heuristic.BASELINE
    fallback: bool = False
    selected_floor: int | None = None

    @property
    def floor(self) -> int:
        return self.landmark.floor

    def to_json(self) -> dict:
        lm = self.landmark
        return {
            "client_id": self.client_id,
            "landmark": {"building": lm.building, "floor": lm.floor, "index": lm.index, "x_m": lm.x, "y_m": lm.y},
            "floor": lm.floor,
            "band": self.band.value,
            "score": self.score,
            "cardinality_used": self.cardinality_used,
            "heuristic": self.heuristic.value,
            "requested_heuristic": self.requested.value,
            "fallback": self.fallback,
            "selected_floor": self.selected_floor,
            "matched_ap_count": self.matched_ap_count,
        }


def signal_distance(
    online: OnlineFingerprint,
    offline: OfflineFingerprint,
    sentinel: float = DEFAULT_SENTINEL_DBM,
    keys=None,
) -> float:
    """Euclidean distance over the union of AP keys.

    An AP present on one side only is compared against ``sentinel``. When
    ``keys`` is given the union is intersected with it first.
    """
    if online.band is not offline.band:
        raise BandMismatchError(f"online {online.band.value} vs offline {offline.band.value}")
    union = set(online.entries) | set(offline.entries)
    if keys is not None:
        union &= set(keys)
    total = 0.0
    for ap in union:
        a = online.entries.get(ap, sentinel)
        b = offline.entries.get(ap, sentinel)
        total += (a - b) ** 2
    return math.sqrt(total)


def _match(
    online: OnlineFingerprint,
    db: FingerprintDb,
    sentinel: float,
    floor: int | None = None,
    columns: list[str] | None = None,
) -> tuple[LandmarkId, float, int]:
    landmarks, index, mat, floors = db.dense(online.band, sentinel)
    if not landmarks:
        raise NoMapError(f"no fingerprints for {online.band.value}")
    rows = np.arange(len(landmarks)) if floor is None else np.flatnonzero(floors == floor)
    if rows.size == 0:
        raise NoMapError(f"no fingerprints for floor {floor} in {online.band.value}")

    q = np.full(mat.shape[1], float(sentinel))
    extra = 0.0
    for ap, v in online.entries.items():
        j = index.get(ap)
        if j is None:
            # AP unknown to the map: constant penalty for every candidate.
            if columns is None or ap in columns:
                extra += (v - sentinel) ** 2
        else:
            q[j] = v
    sub = mat[rows]
    if columns is not None:
        cols = [index[ap] for ap in columns if ap in index]
        sub = sub[:, cols]
        q = q[cols]
    d2 = ((sub - q) ** 2).sum(axis=1) + extra
    # Rows are in (building, floor, index) order, so argmin breaks ties low.
    best = int(np.argmin(d2))
    lm = landmarks[rows[best]]
    fp = db.get(lm, online.band)
    matched = sum(1 for ap in online.entries if ap in fp.entries)
    return lm, math.sqrt(float(d2[best])), matched


def localize_baseline(
    online: OnlineFingerprint, db: FingerprintDb, sentinel: float = DEFAULT_SENTINEL_DBM
) -> LocalizationEstimate:
    """Return the landmark whose fingerprint is nearest in signal space."""
    lm, score, matched = _match(online, db, sentinel)
    return LocalizationEstimate(
        online.client_id, lm, online.band, score, len(online.entries), Heuristic.BASELINE, matched
    )


def select_floor(
    online: OnlineFingerprint,
    directory: ApDirectory,
    assoc_ap: str | None,
    heuristic: Heuristic,
) -> int:
    """Pick the floor the client is most likely on.

    MaxApCount: floor with most reporting APs; ties go to the floor holding
    the strongest AP among the tied floors, then the lowest floor number.
    MaxRssiFloor: floor of the strongest AP, ties to the lowest floor.
    AssociationFloor: floor of the association AP.
    """
    if heuristic is Heuristic.ASSOCIATION_FLOOR:
        if not assoc_ap or assoc_ap not in directory:
            raise HeuristicInapplicableError("client has no known association AP")
        return directory.floor_of(assoc_ap)

    known = [(ap, v) for ap, v in online.entries.items() if ap in directory]
    if not known:
        raise HeuristicInapplicableError("no reporting AP is in the directory")
    if heuristic is Heuristic.MAX_RSSI_FLOOR:
        top = max(v for _, v in known)
        return min(directory.floor_of(ap) for ap, v in known if v == top)
    if heuristic is Heuristic.MAX_AP_COUNT:
        counts = Counter(directory.floor_of(ap) for ap, _ in known)
        most = max(counts.values())
        tied = {f for f, c in counts.items() if c == most}
        strongest = {}
        for ap, v in known:
            f = directory.floor_of(ap)
            if f in tied:
                strongest[f] = max(strongest.get(f, -math.inf), v)
        top = max(strongest.values())
        return min(f for f, v in strongest.items() if v == top)
    raise ValueError(f"{heuristic} does not select a floor")


def localize_with_heuristic(
    online: OnlineFingerprint,
    db: FingerprintDb,
    directory: ApDirectory | None = None,
    assoc_ap: str | None = None,
    cfg: HeuristicConfig = HeuristicConfig(),
) -> LocalizationEstimate:
    """Shortlist APs on a selected floor, then match against that floor only.

    Falls back to Baseline (flagged in the estimate) when the heuristic
    cannot be applied or the shortlist leaves no online AP.
    """
    directory = directory if directory is not None else db.directory
    sentinel = cfg.missing_ap_sentinel
    if cfg.heuristic is Heuristic.BASELINE:
        return localize_baseline(online, db, sentinel)

    def fallback() -> LocalizationEstimate:
        est = localize_baseline(online, db, sentinel)
        return LocalizationEstimate(
            est.client_id, est.landmark, est.band, est.score, est.cardinality_used,
            Heuristic.BASELINE, est.matched_ap_count, cfg.heuristic, True, None,
        )

    try:
        floor = select_floor(online, directory, assoc_ap, cfg.heuristic)
    except HeuristicInapplicableError:
        return fallback()
    shortlisted = online.restricted(ap for ap in online.entries if ap in directory and directory.floor_of(ap) == floor)
    if not shortlisted.entries:
        return fallback()
    if cfg.scope is MatchScope.SHORTLIST:
        columns = list(shortlisted.entries)
    elif cfg.scope is MatchScope.FLOOR:
        columns = [ap.ap_id for ap in directory if ap.floor == floor]
    else:
        columns = None
    try:
        lm, score, matched = _match(shortlisted, db, sentinel, floor=floor, columns=columns)
    except NoMapError:
        return fallback()
    return LocalizationEstimate(
        online.client_id, lm, online.band, score, len(shortlisted.entries),
        cfg.heuristic, matched, cfg.heuristic, False, floor,
    )
