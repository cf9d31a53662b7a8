"""Discrete-event loop that turns a scenario into RTLS feed records and a truth log."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..feed import RATES_80211G, Assoc, RtlsRecord, serialize_record
from ..model import Band, LandmarkId
from .controller import controller_tick
from .propagation import LinkTable
from .scanning import ClientState, schedule_scans
from .scenario import ClientSim, SimScenario

# Same-instant ordering: the report tick covers everything observed at its
# instant, and a client leaves its landmark only after that report, so a
# report never mixes two landmarks.
_PRIO = {"ctrl": 0, "screen_on": 1, "screen_off": 1, "scan": 2, "report": 3, "move": 4}


@dataclass(frozen=True)
class TruthRow:
    client_id: str
    landmark: LandmarkId
    enter_ms: int
    exit_ms: int

    def to_csv(self) -> str:
        lm = self.landmark
        return f"{self.client_id},{lm.building},{lm.floor},{lm.index},{self.enter_ms},{self.exit_ms}"


@dataclass(frozen=True)
class ScanEvent:
    client_id: str
    time_ms: int
    bands: tuple[Band, ...]
    cause: str  # background | screen | handover | survey | low_rssi


@dataclass
class SimResult:
    records: list[RtlsRecord]
    truth: list[TruthRow]
    scans: list[ScanEvent] = field(default_factory=list)
    clients: dict[str, ClientState] = field(default_factory=dict)
    assoc_bands: dict[str, Band | None] = field(default_factory=dict)

    def feed_lines(self) -> Iterator[str]:
        for r in self.records:
            yield serialize_record(r)


@dataclass
class _Acc:
    total: float = 0.0
    n: int = 0
    last: float = -math.inf
    data: bool = False


class Simulation:
    """Single-threaded event loop over one scenario.

    All randomness comes from streams spawned off ``scenario.seed``, so the
    same scenario always yields the same records.
    """

    def __init__(self, scenario: SimScenario):
        self.sc = scenario.copy()
        streams = np.random.SeedSequence(scenario.seed).spawn(5)
        self.rng_noise, self.rng_scan, self.rng_ctrl, self.rng_traffic, self.rng_rate = (
            np.random.default_rng(s) for s in streams
        )
        self.aps = self.sc.aps
        self.clients = self.sc.clients
        self.period = float(self.sc.rtls_report_period_s)
        self.prop = self.sc.propagation
        self.end = self.sc.total_duration()
        self._links: dict[tuple, LinkTable] = {}
        self._acc: dict[tuple[int, Band, int], _Acc] = {}
        self._sticky: dict[tuple[int, Band, int], tuple[float, int, float]] = {}
        self._heap: list = []
        self._seq = 0
        self._path_pos = [-1] * len(self.clients)
        self._active = [True] * len(self.clients)
        self._scan_gen = [0] * len(self.clients)
        self.records: list[RtlsRecord] = []
        self.truth: list[TruthRow] = []
        self.scans: list[ScanEvent] = []
        self._refresh_radio_arrays()

    # -- helpers ---------------------------------------------------------
    def _push(self, t: float, kind: str, *payload):
        self._seq += 1
        heapq.heappush(self._heap, (t, _PRIO[kind], self._seq, kind, payload))

    def _ms(self, t: float) -> int:
        return self.sc.start_epoch_ms + int(round(t * 1000))

    def _refresh_radio_arrays(self):
        self.chan = {b: np.array([ap.channels[b] for ap in self.aps]) for b in Band}
        self.offset = {b: np.array([ap.tx_offset(b) for ap in self.aps]) for b in Band}
        self.over = {b: np.array([ap.overloaded[b] for ap in self.aps]) for b in Band}

    def link(self, pos, band: Band) -> LinkTable:
        key = (pos, band)
        lt = self._links.get(key)
        if lt is None:
            lt = self._links[key] = LinkTable.build(self.aps, pos, band, self.prop)
        return lt

    def _noise(self, half: float, shape):
        if not self.prop.noise or half <= 0:
            return np.zeros(shape)
        return self.rng_noise.uniform(-half, half, shape)

    def _add_frames(self, band: Band, c: int, idx: np.ndarray, rssi: np.ndarray, t_last: float, data: bool):
        # rssi: (frames, len(idx))
        sums = rssi.sum(axis=0)
        n = rssi.shape[0]
        for j, a in enumerate(idx):
            acc = self._acc.get((int(a), band, c))
            if acc is None:
                acc = self._acc[(int(a), band, c)] = _Acc()
            acc.total += float(sums[j])
            acc.n += n
            acc.last = max(acc.last, t_last)
            acc.data = acc.data or data

    # -- behaviours ------------------------------------------------------
    def _scan(self, t: float, c: int, bands: tuple[Band, ...], cause: str):
        client = self.clients[c]
        k = self.sc.scan.probes_per_scan
        for band in bands:
            lt = self.link(client.position, band)
            idx = np.flatnonzero(lt.in_range)
            if idx.size == 0:
                continue
            half = self.prop.params(band).scan_noise_db
            frames = lt.base[idx] + self._noise(half, (k, idx.size))
            self._add_frames(band, c, idx, frames, t, data=False)
        self.scans.append(ScanEvent(client.client_id, self._ms(t), tuple(bands), cause))
        if not client.continuous_scan:
            # The next background scan is timed from the latest scan of any cause.
            self._scan_gen[c] += 1
            self._push(schedule_scans(client, self.rng_scan, t, self.sc.scan), "scan", c, "background",
                       self._scan_gen[c])

    def _scan_bands(self, client: ClientSim, must: Band | None = None) -> tuple[Band, ...]:
        if client.continuous_scan:
            return (Band.BAND24, Band.BAND5)
        sm = self.sc.scan
        u = self.rng_scan.random(2)
        bands = set()
        if u[0] < sm.band24_prob:
            bands.add(Band.BAND24)
        if u[1] < sm.band5_prob:
            bands.add(Band.BAND5)
        if must is not None:
            bands.add(must)
        if not bands:
            bands.add(Band.BAND24)
        return tuple(b for b in Band if b in bands)

    def _best_radio(self, client: ClientSim) -> tuple[int | None, float]:
        band = client.assoc_band
        lt = self.link(client.position, band)
        vals = np.where(lt.in_range, lt.base + self.offset[band], -np.inf)
        if not np.isfinite(vals).any():
            return None, -math.inf
        pool = vals.copy()
        if (lt.in_range & ~self.over[band]).any():
            pool[self.over[band]] = -np.inf
        a = int(np.argmax(pool))
        return a, float(vals[a])

    def _roam(self, t: float, c: int, initial: bool = False):
        client = self.clients[c]
        if not client.state.associated or client.assoc_band is None:
            return
        band = client.assoc_band
        best, best_val = self._best_radio(client)
        if best is None:
            client.assoc_ap = None
            return
        cur = client.assoc_ap
        if cur is not None:
            lt = self.link(client.position, band)
            cur_val = lt.base[cur] + self.offset[band][cur] if lt.in_range[cur] else -math.inf
            tm = self.sc.traffic
            if cur_val >= tm.roam_threshold_dbm and best_val < cur_val + tm.roam_hysteresis_db:
                return
            if best == cur:
                return
        if not initial and self.sc.scan.handover_scan:
            self._scan(t, c, self._scan_bands(client, must=band), "handover")
        if cur is not None:
            self._sticky.pop((cur, band, c), None)
        client.assoc_ap = best

    def _data_frames(self, t: float, c: int):
        client = self.clients[c]
        if client.assoc_ap is None or client.assoc_band is None:
            return
        tm = self.sc.traffic
        st = client.state
        if st is ClientState.ACTIVE:
            n = tm.active_frames
        elif st is ClientState.INTERMITTENT and client.screen_on:
            n = tm.screen_on_frames
        else:
            n = 1 if self.rng_traffic.random() < tm.keepalive_prob else 0
        if n == 0:
            return
        band = client.assoc_band
        lt = self.link(client.position, band)
        a0 = client.assoc_ap
        hear = lt.in_range & (
            (self.chan[band] == self.chan[band][a0]) | (self.rng_traffic.random(len(self.aps)) < tm.offchannel_hear_prob)
        )
        hear[a0] = lt.in_range[a0]
        idx = np.flatnonzero(hear)
        if idx.size == 0:
            return
        times = t - self.period * self.rng_traffic.random(n)
        half = self.prop.params(band).nonscan_noise_db
        frames = lt.base[idx] + self.offset[band][idx] + self._noise(half, (n, idx.size))
        self._add_frames(band, c, idx, frames, float(times.max()), data=True)

    def _data_rate(self, radio_rate: float, associated: bool) -> float:
        if associated:
            pool = RATES_80211G
        else:
            # Overheard data frames never use probe-response rates here, so the
            # only systematic misclassification is the association-AP case.
            pool = tuple(r for r in RATES_80211G if r not in (1.0, 6.0, 24.0))
        return float(pool[self.rng_rate.integers(len(pool))])

    def _report(self, t: float):
        for c, client in enumerate(self.clients):
            if self._active[c]:
                self._data_frames(t, c)
        ts = self._ms(t)
        out = []
        heard = set()
        for (a, band, c), acc in self._acc.items():
            client = self.clients[c]
            ap = self.aps[a]
            mine = client.assoc_ap == a and client.assoc_band is band
            heard.add((a, band, c))
            rssi = _clip_rssi(acc.total / acc.n)
            rate = self._data_rate(ap.probe_rates[band], mine) if acc.data else ap.probe_rates[band]
            if mine:
                self._sticky[(a, band, c)] = (acc.last, rssi, rate)
            if ap.overloaded[band] and not mine:
                continue
            age = max(0, int(math.floor(t - acc.last + 1e-9)))
            out.append(
                RtlsRecord(ts, client.client_id, age, ap.channels[band], ap.ap_id,
                           Assoc.ASSOCIATED if mine else Assoc.UNASSOCIATED, rate, rssi)
            )
        retention = self.sc.traffic.assoc_retention_s
        for (a, band, c), (last, rssi, rate) in list(self._sticky.items()):
            client = self.clients[c]
            if (a, band, c) in heard:
                continue
            if client.assoc_ap != a or client.assoc_band is not band or not self._active[c]:
                del self._sticky[(a, band, c)]
                continue
            if t - last > retention:
                continue
            ap = self.aps[a]
            age = max(0, int(math.floor(t - last + 1e-9)))
            out.append(RtlsRecord(ts, client.client_id, age, ap.channels[band], ap.ap_id, Assoc.ASSOCIATED, rate, rssi))
        out.sort(key=lambda r: (r.ap_id, r.channel, r.client_id))
        self.records.extend(out)
        self._acc.clear()

    # -- main loop -------------------------------------------------------
    def run(self) -> SimResult:
        sc = self.sc
        for c, client in enumerate(self.clients):
            self._push(0.0, "move", c)
            if client.continuous_scan:
                self._push(self.rng_scan.uniform(0.5, self.period - 0.5), "scan", c, "survey")
            else:
                self._push(schedule_scans(client, self.rng_scan, 0.0, sc.scan), "scan", c, "background", 0)
                if client.state is ClientState.INTERMITTENT:
                    self._push(self.rng_scan.exponential(sc.scan.screen_on_mean_interval_s), "screen_on", c)
        for band in Band:
            if sc.controller[band].active:
                self._push(0.0, "ctrl", band)
        self._push(self.period, "report")

        while self._heap:
            t, _, _, kind, payload = heapq.heappop(self._heap)
            if t > self.end + 1e-9:
                break
            getattr(self, f"_on_{kind}")(t, *payload)

        states = {c.client_id: c.state for c in self.clients}
        bands = {c.client_id: c.assoc_band for c in self.clients}
        return SimResult(self.records, self.truth, self.scans, states, bands)

    def _on_move(self, t: float, c: int):
        client = self.clients[c]
        self._path_pos[c] += 1
        i = self._path_pos[c]
        if i >= len(client.path):
            self._active[c] = False
            client.assoc_ap = None
            return
        visit = client.path[i]
        lm = visit.landmark
        client.position = (lm.floor, lm.x, lm.y)
        enter = self._ms(t)
        self.truth.append(TruthRow(client.client_id, lm, enter, enter + visit.dwell_s * 1000))
        self._roam(t, c, initial=(i == 0))
        self._push(t + visit.dwell_s, "move", c)

    def _on_scan(self, t: float, c: int, cause: str, gen: int = 0):
        client = self.clients[c]
        if not self._active[c]:
            return
        if cause == "survey":
            self._scan(t, c, self._scan_bands(client), cause)
            self._push(t + self.period, "scan", c, cause)
            return
        if gen != self._scan_gen[c]:
            return  # superseded by a later scan
        self._scan(t, c, self._scan_bands(client), cause)

    def _on_screen_on(self, t: float, c: int):
        client = self.clients[c]
        if not self._active[c]:
            return
        sm = self.sc.scan
        client.screen_on = True
        self._scan(t, c, self._scan_bands(client), "screen")
        self._push(t + self.rng_scan.exponential(sm.screen_session_mean_s), "screen_off", c)
        self._push(t + self.rng_scan.exponential(sm.screen_on_mean_interval_s), "screen_on", c)

    def _on_screen_off(self, t: float, c: int):
        self.clients[c].screen_on = False

    def _on_ctrl(self, t: float, band: Band):
        policy = self.sc.controller[band]
        controller_tick(self.aps, self.clients, policy, self.rng_ctrl, band)
        self._refresh_radio_arrays()
        self._push(t + policy.period_s, "ctrl", band)

    def _on_report(self, t: float):
        self._report(t)
        low = self.sc.scan.low_rssi_scan_dbm
        if low is not None:
            for c, client in enumerate(self.clients):
                if self._active[c] and client.assoc_ap is not None:
                    lt = self.link(client.position, client.assoc_band)
                    if lt.base[client.assoc_ap] < low:
                        self._scan(t, c, self._scan_bands(client), "low_rssi")
        self._push(t + self.period, "report")


def _clip_rssi(v: float) -> int:
    return int(min(0, max(-100, math.floor(v + 0.5))))


def run_ground_truth(scenario: SimScenario) -> SimResult:
    """Run the scenario to completion: feed records plus per-visit truth."""
    return Simulation(scenario).run()


def emit_rtls(scenario: SimScenario, window: tuple[float, float] | None = None) -> Iterator[str]:
    """Feed lines produced by ``scenario``, optionally restricted to the
    simulated-time window ``[start_s, end_s)``."""
    res = run_ground_truth(scenario)
    if window is None:
        yield from res.feed_lines()
        return
    lo = scenario.start_epoch_ms + int(window[0] * 1000)
    hi = scenario.start_epoch_ms + int(window[1] * 1000)
    for r in res.records:
        if lo <= r.timestamp < hi:
            yield serialize_record(r)
