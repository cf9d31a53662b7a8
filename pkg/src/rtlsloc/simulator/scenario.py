"""Scenario description: building, APs, clients, controller policy and seed."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..model import ApDirectory, ApInfo, Band, LandmarkId
from .controller import CHANNEL_PLAN, TX_OFFSET_MAX_DB, TX_OFFSET_MIN_DB, ControllerPolicy
from .propagation import PropagationModel
from .scanning import ClientState, ScanModel

SCENARIO_FORMAT = "rtlsloc-scenario"
SCENARIO_VERSION = 1
DEFAULT_START_EPOCH_MS = 1496131200000


@dataclass
class Building:
    name: str = "B1"
    floors: int = 3
    cols: int = 25
    rows: int = 2
    pitch_m: float = 3.0

    def __post_init__(self):
        if self.pitch_m <= 0:
            raise ValueError("landmark pitch must be positive")

    @property
    def length_m(self) -> float:
        return (self.cols - 1) * self.pitch_m

    @property
    def width_m(self) -> float:
        return (self.rows - 1) * self.pitch_m

    def landmarks(self) -> list[LandmarkId]:
        out = []
        for f in range(1, self.floors + 1):
            i = 0
            for r in range(self.rows):
                for c in range(self.cols):
                    out.append(LandmarkId(self.name, f, i, c * self.pitch_m, r * self.pitch_m))
                    i += 1
        return out


@dataclass
class ApNode:
    ap_id: str
    floor: int
    x: float
    y: float
    channels: dict[Band, int]
    base_tx_power: float = 23.0
    probe_rates: dict[Band, float] = field(default_factory=lambda: {Band.BAND24: 1.0, Band.BAND5: 6.0})
    tx_offsets: dict[Band, float] = field(default_factory=lambda: {b: 0.0 for b in Band})
    load: dict[Band, int] = field(default_factory=lambda: {b: 0 for b in Band})
    overloaded: dict[Band, bool] = field(default_factory=lambda: {b: False for b in Band})

    def __post_init__(self):
        for band, ch in self.channels.items():
            if ch not in CHANNEL_PLAN[band] and not _legal(band, ch):
                raise ValueError(f"channel {ch} illegal for {band.value}")
        for band, off in self.tx_offsets.items():
            if not TX_OFFSET_MIN_DB <= off <= TX_OFFSET_MAX_DB:
                raise ValueError(f"tx offset {off} outside [-6, 0]")

    def tx_offset(self, band: Band) -> float:
        return self.tx_offsets.get(band, 0.0)

    @property
    def position(self) -> tuple[int, float, float]:
        return (self.floor, self.x, self.y)

    def to_json(self) -> dict:
        return {
            "ap_id": self.ap_id,
            "floor": self.floor,
            "x_m": self.x,
            "y_m": self.y,
            "channels": {b.value: c for b, c in self.channels.items()},
            "base_tx_power": self.base_tx_power,
            "probe_rates": {b.value: r for b, r in self.probe_rates.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ApNode":
        return cls(
            obj["ap_id"].lower(),
            int(obj["floor"]),
            float(obj["x_m"]),
            float(obj["y_m"]),
            {Band(b): int(c) for b, c in obj["channels"].items()},
            float(obj.get("base_tx_power", 23.0)),
            {Band(b): float(r) for b, r in obj.get("probe_rates", {"Band24": 1.0, "Band5": 6.0}).items()},
        )


def _legal(band: Band, ch: int) -> bool:
    from ..model import band_for_channel

    try:
        return band_for_channel(ch) is band
    except ValueError:
        return False


@dataclass
class Visit:
    landmark: LandmarkId
    dwell_s: int

    def __post_init__(self):
        if self.dwell_s < 0:
            raise ValueError("dwell must be non-negative")


@dataclass
class ClientSim:
    client_id: str
    state: ClientState
    path: list[Visit]
    assoc_band: Band | None = Band.BAND24
    continuous_scan: bool = False  # survey mode: scan every report period, both bands
    # runtime fields
    assoc_ap: int | None = None
    position: tuple[int, float, float] = (0, 0.0, 0.0)
    next_scan_at: float = 0.0
    screen_on: bool = False

    def __post_init__(self):
        if self.state is ClientState.DISCONNECTED:
            self.assoc_band = None
        if self.state is ClientState.DISCONNECTED and self.assoc_ap is not None:
            raise ValueError("a disconnected client cannot be associated")

    def to_json(self) -> dict:
        return {
            "client_id": self.client_id,
            "state": self.state.value,
            "assoc_band": self.assoc_band.value if self.assoc_band else None,
            "continuous_scan": self.continuous_scan,
            "path": [[v.landmark.floor, v.landmark.index, v.dwell_s] for v in self.path],
        }


@dataclass
class TrafficModel:
    """Non-scanning frames per report period by client state."""

    active_frames: int = 6
    screen_on_frames: int = 4
    keepalive_prob: float = 0.05  # per period, Inactive and screen-off Intermittent
    offchannel_hear_prob: float = 0.05  # in-range AP on another channel catches the period's traffic
    roam_threshold_dbm: float = -70.0
    roam_hysteresis_db: float = 8.0
    assoc_retention_s: float = 120.0  # association AP keeps reporting a silent client this long

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SimScenario:
    building: Building
    aps: list[ApNode]
    clients: list[ClientSim]
    controller: dict[Band, ControllerPolicy] = field(default_factory=lambda: {b: ControllerPolicy.off() for b in Band})
    propagation: PropagationModel = field(default_factory=PropagationModel)
    scan: ScanModel = field(default_factory=ScanModel)
    traffic: TrafficModel = field(default_factory=TrafficModel)
    rtls_report_period_s: float = 5.0
    seed: int = 0
    duration_s: float | None = None  # defaults to the longest client path
    start_epoch_ms: int = DEFAULT_START_EPOCH_MS

    def __post_init__(self):
        if self.rtls_report_period_s <= 0:
            raise ValueError("rtls_report_period_s must be positive")

    def copy(self) -> "SimScenario":
        return copy.deepcopy(self)

    def landmarks(self) -> list[LandmarkId]:
        return self.building.landmarks()

    def landmark_map(self) -> dict[tuple[int, int], LandmarkId]:
        return {(lm.floor, lm.index): lm for lm in self.landmarks()}

    def directory(self) -> ApDirectory:
        return ApDirectory(
            ApInfo(ap.ap_id, self.building.name, ap.floor, ap.x, ap.y, dict(ap.channels), ap.base_tx_power)
            for ap in self.aps
        )

    def total_duration(self) -> float:
        if self.duration_s is not None:
            return float(self.duration_s)
        return float(max((sum(v.dwell_s for v in c.path) for c in self.clients), default=0))

    def with_controller(self, band24: ControllerPolicy, band5: ControllerPolicy) -> "SimScenario":
        s = self.copy()
        s.controller = {Band.BAND24: band24, Band.BAND5: band5}
        return s

    def to_json(self) -> dict:
        b = self.building
        return {
            "format": SCENARIO_FORMAT,
            "version": SCENARIO_VERSION,
            "seed": self.seed,
            "duration_s": self.duration_s,
            "start_epoch_ms": self.start_epoch_ms,
            "rtls_report_period_s": self.rtls_report_period_s,
            "building": {"name": b.name, "floors": b.floors, "cols": b.cols, "rows": b.rows, "pitch_m": b.pitch_m},
            "aps": [ap.to_json() for ap in self.aps],
            "clients": [c.to_json() for c in self.clients],
            "controller": {band.value: p.to_json() for band, p in self.controller.items()},
            "propagation": self.propagation.to_json(),
            "scan": self.scan.to_json(),
            "traffic": self.traffic.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SimScenario":
        if doc.get("format") != SCENARIO_FORMAT:
            raise ValueError("not a scenario document")
        if doc.get("version") != SCENARIO_VERSION:
            raise ValueError(f"unsupported scenario version {doc.get('version')!r}")
        if "preset" in doc:
            return _from_preset(doc)
        building = Building(**doc["building"])
        lm_map = {(lm.floor, lm.index): lm for lm in building.landmarks()}
        clients = []
        for c in doc["clients"]:
            path = [Visit(lm_map[(int(f), int(i))], int(d)) for f, i, d in c["path"]]
            clients.append(
                ClientSim(
                    c["client_id"],
                    ClientState(c["state"]),
                    path,
                    Band(c["assoc_band"]) if c.get("assoc_band") else None,
                    bool(c.get("continuous_scan", False)),
                )
            )
        return cls(
            building=building,
            aps=[ApNode.from_json(a) for a in doc["aps"]],
            clients=clients,
            controller={Band(k): ControllerPolicy.from_json(v) for k, v in doc.get("controller", {}).items()}
            or {b: ControllerPolicy.off() for b in Band},
            propagation=PropagationModel.from_json(doc.get("propagation", {})),
            scan=ScanModel.from_json(doc.get("scan", {})),
            traffic=TrafficModel(**doc.get("traffic", {})),
            rtls_report_period_s=float(doc.get("rtls_report_period_s", 5.0)),
            seed=int(doc.get("seed", 0)),
            duration_s=doc.get("duration_s"),
            start_epoch_ms=int(doc.get("start_epoch_ms", DEFAULT_START_EPOCH_MS)),
        )


def _from_preset(doc: dict) -> SimScenario:
    """Compact scenario files: ``{"preset": "desk", "seed": 3, ...overrides}``."""
    preset = doc["preset"]
    kw = {k: v for k, v in doc.items() if k in ("seed", "duration_s", "intensity24", "intensity5")}
    if preset == "desk":
        s = desk_scenario(**kw)
    elif preset == "survey":
        s = survey_scenario(desk_scenario(seed=int(doc.get("seed", 0))))
    elif preset == "perfect":
        s = perfect_scenario(seed=int(doc.get("seed", 0)))
    else:
        raise ValueError(f"unknown preset {preset!r}")
    if "controller" in doc:
        s.controller = {Band(k): ControllerPolicy.from_json(v) for k, v in doc["controller"].items()}
    return s


def load_scenario(path: str | Path) -> SimScenario:
    with open(path, encoding="utf-8") as fh:
        return SimScenario.from_json(json.load(fh))


def save_scenario(scenario: SimScenario, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario.to_json(), fh, indent=1)
        fh.write("\n")


def client_hash(label: str) -> str:
    return hashlib.sha1(label.encode()).hexdigest()


def layout_aps(building: Building, per_floor: int, rng: np.random.Generator, tx_power: float = 23.0) -> list[ApNode]:
    """Spread ``per_floor`` dual-band APs along each floor, staggered between floors."""
    aps = []
    plan24 = CHANNEL_PLAN[Band.BAND24]
    plan5 = CHANNEL_PLAN[Band.BAND5]
    spacing = building.length_m / per_floor
    for f in range(1, building.floors + 1):
        stagger = ((f - 1) % 3 - 1) * spacing / 3
        for k in range(per_floor):
            x = (k + 0.5) * spacing + stagger + rng.uniform(-1.0, 1.0)
            x = float(np.clip(x, 0.0, building.length_m))
            y = building.width_m * (0.25 if k % 2 == 0 else 0.75) + rng.uniform(-0.5, 0.5)
            y = float(np.clip(y, 0.0, max(building.width_m, 0.0)))
            aps.append(
                ApNode(
                    ap_id=f"02:1a:11:00:{f:02x}:{k:02x}",
                    floor=f,
                    x=round(x, 2),
                    y=round(y, 2),
                    channels={
                        Band.BAND24: plan24[(k + f) % len(plan24)],
                        Band.BAND5: plan5[(k + 3 * f) % len(plan5)],
                    },
                    base_tx_power=tx_power,
                    probe_rates={
                        Band.BAND24: float(rng.choice([1.0, 6.0])),
                        Band.BAND5: float(rng.choice([6.0, 24.0])),
                    },
                )
            )
    return aps


def walk_path(landmarks: list[LandmarkId], start: int, count: int, rng: np.random.Generator, dwell_s: int = 60,
              jitter_s: int = 10) -> list[Visit]:
    """Visit ``count`` landmarks in survey order from ``start`` with ~``dwell_s`` stays."""
    n = len(landmarks)
    out = []
    for i in range(count):
        lm = landmarks[(start + i) % n]
        out.append(Visit(lm, int(dwell_s + rng.integers(-jitter_s, jitter_s + 1))))
    return out


def _snake(landmarks: list[LandmarkId], building: Building) -> list[LandmarkId]:
    # Boustrophedon order so consecutive visits are grid neighbours.
    out = []
    for f in range(1, building.floors + 1):
        rows = []
        for r in range(building.rows):
            row = [lm for lm in landmarks if lm.floor == f and lm.index // building.cols == r]
            rows.append(row if r % 2 == 0 else row[::-1])
        floor_seq = [lm for row in rows for lm in row]
        out.extend(floor_seq if f % 2 == 1 else floor_seq[::-1])
    return out


# Associated desk clients all use 2.4 GHz, so 5 GHz reports come from scans only.
DESK_STATES = (
    (ClientState.DISCONNECTED, None),
    (ClientState.INACTIVE, Band.BAND24),
    (ClientState.INTERMITTENT, Band.BAND24),
    (ClientState.ACTIVE, Band.BAND24),
)
DESK_INTENSITY = 1.0


def desk_scenario(
    seed: int = 0,
    duration_s: float = 3600.0,
    intensity24: float = DESK_INTENSITY,
    intensity5: float = DESK_INTENSITY,
    floors: int = 3,
    cols: int = 25,
    rows: int = 2,
    aps_per_floor: int = 8,
    dwell_s: int = 60,
) -> SimScenario:
    """1 building, 3 floors of 50 landmarks at 3 m, 8 dual-band APs per floor,
    four clients (one per state) walking landmark to landmark for an hour."""
    rng = np.random.default_rng([seed, 7001])
    building = Building("B1", floors, cols, rows, 3.0)
    aps = layout_aps(building, aps_per_floor, rng)
    order = _snake(building.landmarks(), building)
    n_visits = int(np.ceil(duration_s / (dwell_s - 10))) + 1
    clients = []
    for i, (state, band) in enumerate(DESK_STATES):
        start = int(rng.integers(len(order)))
        path = walk_path(order, start, n_visits, rng, dwell_s)
        clients.append(ClientSim(client_hash(f"desk-{seed}-{i}"), state, path, band))
    return SimScenario(
        building=building,
        aps=aps,
        clients=clients,
        controller={
            Band.BAND24: ControllerPolicy.at_intensity(intensity24),
            Band.BAND5: ControllerPolicy.at_intensity(intensity5),
        },
        propagation=PropagationModel(shadow_seed=seed),
        seed=seed,
        duration_s=duration_s,
    )


def survey_scenario(base: SimScenario, dwell_s: int = 300) -> SimScenario:
    """Offline survey of ``base``: one continuously scanning unassociated client
    visiting every landmark for ``dwell_s``, controller off."""
    s = base.copy()
    surveyor = ClientSim(
        client_hash(f"surveyor-{base.seed}"),
        ClientState.DISCONNECTED,
        [Visit(lm, dwell_s) for lm in base.landmarks()],
        None,
        continuous_scan=True,
    )
    s.clients = [surveyor]
    s.controller = {b: ControllerPolicy.off() for b in Band}
    s.duration_s = None
    return s


def perfect_scenario(seed: int = 0, duration_s: float = 1800.0) -> SimScenario:
    """No frame noise, no controller, continuously scanning clients."""
    s = desk_scenario(seed=seed, duration_s=duration_s)
    s.propagation = PropagationModel(shadow_seed=seed, noise=False)
    for c in s.clients:
        c.continuous_scan = True
        c.state = ClientState.DISCONNECTED
        c.assoc_band = None
    return s
