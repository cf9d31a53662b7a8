"""Synthetic WLAN controller: transmit power control, channel reassignment and
load balancing.

Not a vendor emulation. Each knob exists to induce one documented source of
online/offline fingerprint divergence with tunable intensity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..model import Band

TX_OFFSET_MIN_DB = -6.0
TX_OFFSET_MAX_DB = 0.0

CHANNEL_PLAN = {
    Band.BAND24: (1, 6, 11),
    Band.BAND5: (36, 40, 44, 48, 149, 153, 157, 161),
}


@dataclass(frozen=True)
class ControllerPolicy:
    period_s: float = 30.0
    tpc_step_db: float = 0.0  # random-walk step of the per-radio tx offset
    channel_change_prob: float = 0.0  # per radio per tick
    load_threshold: int | None = None  # None disables load balancing
    background_load_mean: float = 0.0  # Poisson mean of unseen clients per radio

    @classmethod
    def off(cls) -> "ControllerPolicy":
        return cls()

    @classmethod
    def at_intensity(cls, k: float, period_s: float = 30.0) -> "ControllerPolicy":
        """One-knob policy family used by calibration; ``k=0`` is fully off."""
        if k <= 0:
            return cls(period_s=period_s)
        return cls(
            period_s=period_s,
            tpc_step_db=1.5 * k,
            channel_change_prob=min(1.0, 0.03 * k),
            load_threshold=4,
            background_load_mean=2.0 * k,
        )

    @property
    def active(self) -> bool:
        return self.tpc_step_db > 0 or self.channel_change_prob > 0 or self.load_threshold is not None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ControllerPolicy":
        if "intensity" in obj:
            return cls.at_intensity(float(obj["intensity"]), float(obj.get("period_s", 30.0)))
        return cls(**obj)


def controller_tick(aps, clients, policy: ControllerPolicy, rng: np.random.Generator, band: Band) -> None:
    """Apply one controller round to the ``band`` radios of ``aps`` in place.

    Updates tx offsets (bounded random walk), occasionally moves a radio to
    another channel, and recomputes which radios are overloaded. Overloaded
    radios stop reporting unassociated clients until the next tick.
    """
    n = len(aps)
    if policy.tpc_step_db > 0:
        steps = rng.uniform(-policy.tpc_step_db, policy.tpc_step_db, n)
        for ap, s in zip(aps, steps):
            ap.tx_offsets[band] = float(np.clip(ap.tx_offsets[band] + s, TX_OFFSET_MIN_DB, TX_OFFSET_MAX_DB))
    if policy.channel_change_prob > 0:
        flips = rng.random(n) < policy.channel_change_prob
        for ap, flip in zip(aps, flips):
            if flip:
                choices = [c for c in CHANNEL_PLAN[band] if c != ap.channels[band]]
                ap.channels[band] = int(choices[rng.integers(len(choices))])
    for ap in aps:
        ap.load[band] = 0
    for c in clients:
        if c.assoc_ap is not None and c.assoc_band is band:
            aps[c.assoc_ap].load[band] += 1
    background = rng.poisson(policy.background_load_mean, n) if policy.background_load_mean > 0 else np.zeros(n, int)
    for ap, extra in zip(aps, background):
        ap.load[band] += int(extra)
        ap.overloaded[band] = policy.load_threshold is not None and ap.load[band] > policy.load_threshold
