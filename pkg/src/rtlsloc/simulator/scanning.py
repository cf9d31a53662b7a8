"""Client scan scheduling: heavy-tailed inter-scan gaps per client state."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

Z90 = 1.2815515655446004  # standard normal 90th percentile


class ClientState(str, enum.Enum):
    DISCONNECTED = "Disconnected"
    INACTIVE = "Inactive"
    INTERMITTENT = "Intermittent"
    ACTIVE = "Active"

    @property
    def associated(self) -> bool:
        return self is not ClientState.DISCONNECTED


@dataclass(frozen=True)
class GapProfile:
    """Log-normal inter-scan gap pinned by its median and 90th percentile.

    Draws below ``min_gap_s`` are raised to it, which leaves the median and
    upper percentiles untouched as long as ``min_gap_s`` < median.
    """

    median_s: float
    p90_s: float
    min_gap_s: float = 5.0

    @property
    def sigma(self) -> float:
        return math.log(self.p90_s / self.median_s) / Z90

    def draw(self, rng: np.random.Generator, size=None):
        g = self.median_s * np.exp(self.sigma * rng.standard_normal(size))
        return np.maximum(g, self.min_gap_s)


@dataclass(frozen=True)
class ScanModel:
    gaps: dict[str, GapProfile] = field(
        default_factory=lambda: {
            ClientState.DISCONNECTED.value: GapProfile(38.0, 1800.0),
            ClientState.INACTIVE.value: GapProfile(32.0, 1500.0),
            ClientState.INTERMITTENT.value: GapProfile(18.0, 1200.0),
            ClientState.ACTIVE.value: GapProfile(17.5, 1200.0),
        }
    )
    screen_on_mean_interval_s: float = 600.0  # Intermittent only
    screen_session_mean_s: float = 45.0
    handover_scan: bool = True
    # Probability that a scan covers each band; at least one band is always scanned.
    band24_prob: float = 0.85
    band5_prob: float = 0.35
    probes_per_scan: int = 2
    # Direct RSSI-triggered scans: off unless a threshold is configured.
    low_rssi_scan_dbm: float | None = None

    def profile(self, state: ClientState) -> GapProfile:
        return self.gaps[state.value]

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ScanModel":
        kw = dict(obj)
        if "gaps" in kw:
            base = cls().gaps
            base.update({k: GapProfile(**v) for k, v in kw["gaps"].items()})
            kw["gaps"] = base
        return cls(**kw)


def schedule_scans(client, rng: np.random.Generator, now: float = 0.0, model: ScanModel = ScanModel()) -> float:
    """Simulated time of the client's next background scan.

    Screen-on scans (Intermittent) and handover scans are extra events the
    engine injects on top of this background process.
    """
    return now + float(model.profile(client.state).draw(rng))
