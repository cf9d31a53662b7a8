"""Log-distance propagation with floor attenuation, hard range cutoffs and
frame-class dependent RSSI noise."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from statistics import NormalDist

import numpy as np

from ..feed import FrameClass
from ..model import Band

MIN_DISTANCE_M = 1.0


@dataclass(frozen=True)
class BandPropagation:
    exponent: float
    ref_loss_db: float  # path loss at 1 m
    cutoff_m: float  # hard range on the floor-attenuated distance
    floor_atten_db: float = 15.0
    scan_noise_db: float = 5.0  # half-width of the uniform per-frame noise
    nonscan_noise_db: float = 15.0


DEFAULT_BAND24 = BandPropagation(exponent=3.0, ref_loss_db=40.0, cutoff_m=30.0, nonscan_noise_db=15.0)
DEFAULT_BAND5 = BandPropagation(exponent=3.5, ref_loss_db=44.0, cutoff_m=15.0, nonscan_noise_db=7.5)


@dataclass(frozen=True)
class PropagationModel:
    band24: BandPropagation = DEFAULT_BAND24
    band5: BandPropagation = DEFAULT_BAND5
    floor_height_m: float = 4.0
    shadowing_db: float = 2.0  # std-dev of the static (per link) shadowing term
    shadow_seed: int = 0
    noise: bool = True

    def params(self, band: Band) -> BandPropagation:
        return self.band24 if band is Band.BAND24 else self.band5

    def distance_3d(self, ap_pos: tuple[int, float, float], pos: tuple[int, float, float]) -> float:
        floors = abs(ap_pos[0] - pos[0])
        dz = floors * self.floor_height_m
        return math.sqrt((ap_pos[1] - pos[1]) ** 2 + (ap_pos[2] - pos[2]) ** 2 + dz * dz)

    def effective_distance(self, ap_pos, pos, band: Band) -> float:
        """3-D distance stretched so that log-distance loss absorbs floor attenuation."""
        p = self.params(band)
        floors = abs(ap_pos[0] - pos[0])
        d = max(self.distance_3d(ap_pos, pos), MIN_DISTANCE_M)
        return d * 10 ** (floors * p.floor_atten_db / (10 * p.exponent))

    def path_loss(self, d_eff: float, band: Band) -> float:
        p = self.params(band)
        return p.ref_loss_db + 10 * p.exponent * math.log10(max(d_eff, MIN_DISTANCE_M))

    def shadow(self, ap_id: str, pos: tuple[int, float, float], band: Band) -> float:
        if self.shadowing_db <= 0:
            return 0.0
        return self.shadowing_db * _unit_shadow(self.shadow_seed, ap_id, band.value, pos[0], round(pos[1], 2), round(pos[2], 2))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PropagationModel":
        kw = dict(obj)
        for key in ("band24", "band5"):
            if key in kw:
                base = DEFAULT_BAND24 if key == "band24" else DEFAULT_BAND5
                kw[key] = BandPropagation(**{**asdict(base), **kw[key]})
        return cls(**kw)


@lru_cache(maxsize=None)
def _unit_shadow(seed: int, ap_id: str, band: str, floor: int, x: float, y: float) -> float:
    # Deterministic per-link draw, clipped to +-2 sigma.
    h = hashlib.blake2b(f"{seed}|{ap_id}|{band}|{floor}|{x:.2f}|{y:.2f}".encode(), digest_size=8)
    u = (int.from_bytes(h.digest(), "big") + 0.5) / 2**64
    return max(-2.0, min(2.0, NormalDist().inv_cdf(u)))


def mean_rssi(ap, position, band: Band, model: PropagationModel) -> float | None:
    """Noise-free received power, or None when the AP cannot hear ``position``."""
    ap_pos = (ap.floor, ap.x, ap.y)
    d_eff = model.effective_distance(ap_pos, position, band)
    if d_eff > model.params(band).cutoff_m:
        return None
    return ap.base_tx_power - model.path_loss(d_eff, band) + model.shadow(ap.ap_id, position, band)


def rssi_at(
    ap,
    position: tuple[int, float, float],
    band: Band,
    frame_class: FrameClass,
    rng: np.random.Generator,
    model: PropagationModel = PropagationModel(),
) -> float | None:
    """Per-frame RSSI (dBm) at ``ap`` for a client at ``(floor, x, y)``.

    Scanning frames go out at full power with uniform noise of
    ``scan_noise_db``. Non-scanning frames get the wider band-specific noise
    plus the AP's controller-driven transmit power offset.
    """
    base = mean_rssi(ap, position, band, model)
    if base is None:
        return None
    p = model.params(band)
    if frame_class is FrameClass.SCANNING:
        half = p.scan_noise_db
        offset = 0.0
    else:
        half = p.nonscan_noise_db
        offset = ap.tx_offset(band)
    noise = rng.uniform(-half, half) if model.noise and half > 0 else 0.0
    return base + offset + noise


@dataclass
class LinkTable:
    """Vectorised noise-free link budget from one position to every AP of a band."""

    base: np.ndarray  # mean RSSI, NaN where out of range
    in_range: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, aps, position, band: Band, model: PropagationModel) -> "LinkTable":
        vals = np.array([np.nan if (v := mean_rssi(ap, position, band, model)) is None else v for ap in aps])
        return cls(vals, ~np.isnan(vals))
