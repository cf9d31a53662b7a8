"""Live location service: UDP feed listener, per-client sliding windows and an
HTTP query endpoint.

Roles and threads::

    udp socket --recv--> bounded queue --ingest--> ObservationStore <--snapshot-- HTTP query threads

The receive thread only drains the socket. The ingest thread parses, filters
and classifies, then appends under the store lock. Queries copy one client's
buffer under the same lock and do all matching outside it, so a slow query
never holds up admission.
"""

from __future__ import annotations

import json
import logging
import queue
import re
import socket
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

from .feed import (
    DEFAULT_MAX_AGE_S,
    DEFAULT_MIN_RSSI_DBM,
    DEFAULT_PROBE_RATES,
    Assoc,
    FeedError,
    FrameClass,
    RtlsRecord,
    classify_record,
    dedupe_reports,
    filter_record,
    parse_feed_line,
)
from .fingerprint import DEFAULT_ONLINE_WINDOW_S, ClassFilter, FingerprintDb, NoObservationError, load_db
from .localizer import DEFAULT_SENTINEL_DBM, Heuristic, HeuristicConfig, LocalizationEstimate, localize_with_heuristic
from .model import ApDirectory, Band, parse_band, read_ap_directory

log = logging.getLogger(__name__)

MAX_DATAGRAM = 65536
RCVBUF_BYTES = 8 * 1024 * 1024
QUEUE_DATAGRAMS = 16384
SWEEP_EVERY = 2048  # admitted records between full-store evictions

_CLIENT_ID = re.compile(r"[0-9a-f]{40}\Z")


class ConfigError(ValueError):
    pass


@dataclass
class ServiceConfig:
    feed_host: str = "127.0.0.1"
    feed_port: int = 5514
    api_host: str = "127.0.0.1"
    api_port: int = 8080
    db_path: str = "fingerprints.json"
    ap_directory_path: str | None = None  # None: use the directory stored in the db
    window_s: float = DEFAULT_ONLINE_WINDOW_S
    heuristic: str = Heuristic.BASELINE.value
    band: str = Band.BAND24.value  # default band when a query omits it
    max_age_s: int = DEFAULT_MAX_AGE_S
    min_rssi_dbm: int = DEFAULT_MIN_RSSI_DBM
    probe_rates: list[float] = field(default_factory=lambda: sorted(DEFAULT_PROBE_RATES))
    class_filter: str = ClassFilter.BOTH.value
    sentinel_dbm: float = DEFAULT_SENTINEL_DBM
    log_level: str = "INFO"

    @classmethod
    def from_file(cls, path: str | Path) -> "ServiceConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls().with_overrides(**doc)

    def with_overrides(self, **kw) -> "ServiceConfig":
        """Return a copy with every non-None keyword applied; unknown keys are errors."""
        known = {f.name for f in fields(self)}
        unknown = sorted(set(kw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def validate(self, check_files: bool = True) -> "ServiceConfig":
        for name in ("feed_port", "api_port"):
            port = getattr(self, name)
            if not isinstance(port, int) or not 0 <= port <= 65535:
                raise ConfigError(f"{name} must be an integer in [0, 65535], got {port!r}")
        if not self.window_s > 0:
            raise ConfigError("window_s must be positive")
        if self.max_age_s < 0:
            raise ConfigError("max_age_s must be >= 0")
        if not self.sentinel_dbm < self.min_rssi_dbm:
            raise ConfigError("sentinel_dbm must be below min_rssi_dbm")
        try:
            Heuristic(self.heuristic)
            ClassFilter(self.class_filter)
            parse_band(self.band)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if logging.getLevelName(self.log_level.upper()) not in (10, 20, 30, 40, 50):
            raise ConfigError(f"bad log_level {self.log_level!r}")
        if check_files:
            if not Path(self.db_path).is_file():
                raise ConfigError(f"fingerprint db {self.db_path} does not exist")
            if self.ap_directory_path and not Path(self.ap_directory_path).is_file():
                raise ConfigError(f"AP directory {self.ap_directory_path} does not exist")
        return self

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class NotLocalizable:
    client_id: str
    reason: str

    def to_json(self) -> dict:
        return {"client_id": self.client_id, "localizable": False, "reason": self.reason}


@dataclass
class Counters:
    datagrams: int = 0
    lines: int = 0
    parsed: int = 0
    malformed: int = 0
    filtered: int = 0
    accepted: int = 0
    evicted: int = 0
    backpressure: int = 0  # datagrams that waited for queue space


class ObservationStore:
    """Per-client sliding windows of filtered, classified records.

    The store's clock is the newest feed timestamp admitted so far; records
    at or before ``clock - window`` are evicted. The association AP per
    (client, band) is tracked from pre-filter reports so a weak association
    link still identifies the floor.
    """

    def __init__(
        self,
        window_s: float = DEFAULT_ONLINE_WINDOW_S,
        max_age: int = DEFAULT_MAX_AGE_S,
        min_rssi: int = DEFAULT_MIN_RSSI_DBM,
        probe_rates=DEFAULT_PROBE_RATES,
    ):
        self.window_ms = int(window_s * 1000)
        self.max_age = max_age
        self.min_rssi = min_rssi
        self.probe_rates = frozenset(float(r) for r in probe_rates)
        self.counters = Counters()
        self._lock = threading.Lock()
        self._buf: dict[str, deque[tuple[RtlsRecord, FrameClass]]] = {}
        self._assoc: dict[tuple[str, Band], tuple[int, str]] = {}
        self._clock = 0
        self._since_sweep = 0

    @property
    def clock_ms(self) -> int:
        return self._clock

    def admit(self, records) -> int:
        """Filter, classify and append; returns how many records were kept."""
        kept = []
        for r in records:
            if filter_record(r, self.max_age, self.min_rssi):
                kept.append((r, classify_record(r, self.probe_rates)))
        with self._lock:
            for r in records:
                if r.timestamp > self._clock:
                    self._clock = r.timestamp
                if r.assoc is Assoc.ASSOCIATED:
                    key = (r.client_id, r.band)
                    prev = self._assoc.get(key)
                    if prev is None or r.timestamp >= prev[0]:
                        self._assoc[key] = (r.timestamp, r.ap_id)
            for rc in kept:
                self._buf.setdefault(rc[0].client_id, deque()).append(rc)
            self.counters.filtered += len(records) - len(kept)
            self.counters.accepted += len(kept)
            self._since_sweep += len(kept)
            if self._since_sweep >= SWEEP_EVERY:
                self._sweep()
        return len(kept)

    def _evict(self, client: str) -> None:
        buf = self._buf.get(client)
        if buf is None:
            return
        cutoff = self._clock - self.window_ms
        # Records can arrive slightly out of order, so drop by scan rather than only from the left.
        if buf and min(r.timestamp for r, _ in buf) <= cutoff:
            keep = deque(rc for rc in buf if rc[0].timestamp > cutoff)
            self.counters.evicted += len(buf) - len(keep)
            buf = keep
            self._buf[client] = buf
        if not buf:
            del self._buf[client]

    def _sweep(self) -> None:
        for client in list(self._buf):
            self._evict(client)
        cutoff = self._clock - self.window_ms
        for key in [k for k, (ts, _) in self._assoc.items() if ts <= cutoff]:
            del self._assoc[key]
        self._since_sweep = 0

    def snapshot(self, client: str, band: Band) -> tuple[list[tuple[RtlsRecord, FrameClass]], str | None, int]:
        """Point-in-time copy of one client's window in ``band``.

        Returns ``(records, assoc_ap, clock_ms)``. The association AP is only
        reported when it was heard inside the window.
        """
        with self._lock:
            self._evict(client)
            buf = self._buf.get(client, ())
            rows = [rc for rc in buf if rc[0].band is band]
            a = self._assoc.get((client, band))
            assoc = a[1] if a is not None and a[0] > self._clock - self.window_ms else None
            return rows, assoc, self._clock

    def clients(self) -> list[str]:
        with self._lock:
            return sorted(self._buf)

    def size(self) -> int:
        with self._lock:
            return sum(len(b) for b in self._buf.values())

    def stats(self) -> dict:
        with self._lock:
            return {
                **asdict(self.counters),
                "clients": len(self._buf),
                "buffered": sum(len(b) for b in self._buf.values()),
                "clock_ms": self._clock,
            }


def parse_datagram(payload: bytes, counters: Counters) -> list[RtlsRecord]:
    """Split a datagram into records; malformed lines are counted and skipped."""
    counters.datagrams += 1
    out = []
    text = payload.decode("utf-8", errors="replace")
    for line in text.splitlines():
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        counters.lines += 1
        try:
            out.append(parse_feed_line(s))
        except FeedError as exc:
            counters.malformed += 1
            log.debug("malformed feed line %r: %s", s[:80], exc)
    counters.parsed += len(out)
    return out


def query_location(
    store: ObservationStore,
    db: FingerprintDb,
    client_id: str,
    band: Band,
    heuristic: Heuristic = Heuristic.BASELINE,
    directory: ApDirectory | None = None,
    class_filter: ClassFilter = ClassFilter.BOTH,
    sentinel: float = DEFAULT_SENTINEL_DBM,
) -> LocalizationEstimate | NotLocalizable:
    """Localize ``client_id`` from its current window in ``band``."""
    from .fingerprint import assemble_online

    rows, assoc_ap, clock = store.snapshot(client_id, band)
    if not rows:
        return NotLocalizable(client_id, "no observations")
    classes = {id(r): c for r, c in rows}
    deduped = dedupe_reports([r for r, _ in rows])
    pairs = [(r, classes[id(r)]) for r in deduped]
    try:
        online = assemble_online(pairs, client_id, band, store.window_ms / 1000, class_filter, end_ms=clock)
    except NoObservationError:
        return NotLocalizable(client_id, "no observations")
    if not db.fingerprints(band):
        return NotLocalizable(client_id, f"no fingerprints for {band.value}")
    cfg = HeuristicConfig(heuristic, sentinel)
    return localize_with_heuristic(online, db, directory, assoc_ap, cfg)


class LocationService:
    """Owns the UDP listener, the ingest worker, the store and the HTTP API.

    Port 0 in the config binds an ephemeral port; the bound addresses are
    available as ``feed_address`` and ``api_address`` after :meth:`start`.
    """

    def __init__(self, cfg: ServiceConfig, db: FingerprintDb | None = None, directory: ApDirectory | None = None):
        self.cfg = cfg
        self.db = db if db is not None else load_db(cfg.db_path)
        if directory is None and cfg.ap_directory_path:
            directory = read_ap_directory(cfg.ap_directory_path)
        self.directory = directory if directory is not None else self.db.directory
        self.store = ObservationStore(cfg.window_s, cfg.max_age_s, cfg.min_rssi_dbm, cfg.probe_rates)
        self.heuristic = Heuristic(cfg.heuristic)
        self.default_band = parse_band(cfg.band)
        self.class_filter = ClassFilter(cfg.class_filter)
        self._queue: queue.Queue[bytes | None] = queue.Queue(QUEUE_DATAGRAMS)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._sock: socket.socket | None = None
        self._http: ThreadingHTTPServer | None = None
        self._pending = 0
        self._pending_cv = threading.Condition()
        self.started_ms = 0

    # -- lifecycle

    def start(self) -> "LocationService":
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, RCVBUF_BYTES)
            sock.bind((self.cfg.feed_host, self.cfg.feed_port))
        except OSError as exc:
            sock.close()
            raise OSError(f"cannot bind feed listener on {self.cfg.feed_host}:{self.cfg.feed_port}: {exc}") from exc
        sock.settimeout(0.2)
        self._sock = sock
        try:
            self._http = ThreadingHTTPServer((self.cfg.api_host, self.cfg.api_port), _make_handler(self))
        except OSError as exc:
            sock.close()
            raise OSError(f"cannot bind query API on {self.cfg.api_host}:{self.cfg.api_port}: {exc}") from exc
        self._http.daemon_threads = True
        self.started_ms = int(time.time() * 1000)
        for name, target in (("rtls-recv", self._recv_loop), ("rtls-ingest", self._ingest_loop), ("rtls-http", self._http.serve_forever)):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        log.info("feed listener on udp://%s:%d, query API on http://%s:%d", *self.feed_address, *self.api_address)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._http is not None:
            self._http.shutdown()
            self._http.server_close()
        self._queue.put(None)
        for t in self._threads:
            t.join(timeout=2)
        if self._sock is not None:
            self._sock.close()
        self._threads.clear()

    def __enter__(self) -> "LocationService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def feed_address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    @property
    def api_address(self) -> tuple[str, int]:
        return self._http.server_address[:2]

    def wait_idle(self, timeout: float = 5.0) -> bool:
        """Block until every received datagram has been ingested."""
        deadline = time.monotonic() + timeout
        with self._pending_cv:
            while self._pending or not self._queue.empty():
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._pending_cv.wait(left)
        return True

    # -- threads

    def _recv_loop(self) -> None:
        sock = self._sock
        while not self._stop.is_set():
            try:
                payload = sock.recv(MAX_DATAGRAM)
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    break
                raise
            with self._pending_cv:
                self._pending += 1
            try:
                self._queue.put_nowait(payload)
            except queue.Full:
                # Never drop: block here and let the kernel buffer absorb the burst.
                self.store.counters.backpressure += 1
                self._queue.put(payload)

    def _ingest_loop(self) -> None:
        while True:
            payload = self._queue.get()
            if payload is None:
                break
            try:
                self.ingest(payload)
            except Exception:  # a bad datagram must never kill ingestion
                log.exception("ingest failed")
            finally:
                with self._pending_cv:
                    self._pending -= 1
                    self._pending_cv.notify_all()

    def ingest(self, payload: bytes) -> int:
        records = parse_datagram(payload, self.store.counters)
        return self.store.admit(records)

    # -- queries

    def locate(self, client_id: str, band: Band | None = None, heuristic: Heuristic | None = None):
        return query_location(
            self.store, self.db, client_id, band or self.default_band, heuristic or self.heuristic,
            self.directory, self.class_filter, self.cfg.sentinel_dbm,
        )


def _make_handler(service: LocationService):
    class Handler(BaseHTTPRequestHandler):
        server_version = "rtlsloc/1"

        def log_message(self, fmt, *args):
            log.debug("%s %s", self.address_string(), fmt % args)

        def _send(self, status: int, body: dict) -> None:
            body = {**body, "server_time_ms": int(time.time() * 1000)}
            data = json.dumps(body, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            url = urlsplit(self.path)
            parts = [p for p in url.path.split("/") if p]
            qs = {k: v[-1] for k, v in parse_qs(url.query).items()}
            if parts == ["v1", "health"]:
                return self._send(200, {"status": "ok"})
            if parts == ["v1", "stats"]:
                return self._send(200, service.store.stats())
            if len(parts) == 3 and parts[:2] == ["v1", "location"]:
                return self._location(parts[2], qs)
            return self._send(404, {"error": f"no route for {url.path}"})

        def _location(self, client_id: str, qs: dict) -> None:
            client_id = client_id.lower()
            if not _CLIENT_ID.match(client_id):
                return self._send(400, {"error": "client_id must be 40 hex characters"})
            try:
                band = parse_band(qs["band"]) if qs.get("band") else None
                heuristic = Heuristic(qs["heuristic"]) if qs.get("heuristic") else None
            except ValueError as exc:
                return self._send(400, {"error": str(exc)})
            result = service.locate(client_id, band, heuristic)
            if isinstance(result, NotLocalizable):
                return self._send(404, result.to_json())
            log.info("estimate %s", json.dumps(result.to_json(), sort_keys=True))
            return self._send(200, {**result.to_json(), "localizable": True})

    return Handler


def serve(cfg: ServiceConfig) -> None:
    """Run the service until interrupted."""
    cfg.validate()
    svc = LocationService(cfg).start()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        log.info("shutting down")
    finally:
        svc.stop()
