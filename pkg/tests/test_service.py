from __future__ import annotations

import json
import socket
import urllib.error
import urllib.request

import pytest

from rtlsloc.feed import serialize_record
from rtlsloc.fingerprint import save_db
from rtlsloc.localizer import Heuristic
from rtlsloc.model import Band, LandmarkId
from rtlsloc.service import (
    ConfigError,
    Counters,
    LocationService,
    NotLocalizable,
    ObservationStore,
    ServiceConfig,
    parse_datagram,
    query_location,
)

from helpers import T0, cid, grid_directory, make_db, rec

DIR = grid_directory(floors=2, per_floor=3)
APS = DIR.ids()  # floor 1: APS[0:3], floor 2: APS[3:6]
LMS = [LandmarkId("B1", f, i, 3.0 * i, 0.0) for f in (1, 2) for i in range(3)]
DB = make_db({lm: {APS[3 * (lm.floor - 1) + k]: -45 - 10 * abs(k - lm.index) for k in range(3)} for lm in LMS}, DIR)


def _line(**kw) -> bytes:
    return (serialize_record(rec(**kw)) + "\n").encode()


# -- config -----------------------------------------------------------------


def test_config_defaults_validate_without_files():
    assert ServiceConfig().validate(check_files=False).band == "Band24"


@pytest.mark.parametrize(
    "override",
    [{"feed_port": 70000}, {"window_s": 0}, {"heuristic": "Psychic"}, {"band": "Band60"},
     {"sentinel_dbm": -60}, {"log_level": "chatty"}, {"class_filter": "Some"}],
)
def test_config_rejects_bad_values(override):
    with pytest.raises(ConfigError):
        ServiceConfig().with_overrides(**override).validate(check_files=False)


def test_config_missing_db_named(tmp_path):
    with pytest.raises(ConfigError, match="nope.json"):
        ServiceConfig(db_path=str(tmp_path / "nope.json")).validate()


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"api_port": 9000, "heuristic": "MaxApCount"}))
    cfg = ServiceConfig.from_file(p).with_overrides(api_port=None, feed_port=6000)
    assert (cfg.api_port, cfg.feed_port, cfg.heuristic) == (9000, 6000, "MaxApCount")
    p.write_text(json.dumps({"colour": "blue"}))
    with pytest.raises(ConfigError, match="colour"):
        ServiceConfig.from_file(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        ServiceConfig.from_file(p)


# -- ingest and store -------------------------------------------------------


def test_malformed_lines_counted_not_fatal():
    c = Counters()
    out = parse_datagram(_line() + b"garbage\n\n# note\n" + _line(ap=APS[1]), c)
    assert len(out) == 2 and (c.lines, c.parsed, c.malformed) == (3, 2, 1)


def test_store_evicts_outside_window():
    store = ObservationStore(window_s=40)
    store.admit([rec(ts=T0, ap=APS[0])])
    store.admit([rec(ts=T0 + 40_000, ap=APS[1])])
    rows, _, clock = store.snapshot(cid(0), Band.BAND24)
    assert clock == T0 + 40_000 and [r.ap_id for r, _ in rows] == [APS[1]]
    assert store.counters.evicted == 1


def test_store_filters_before_buffering():
    store = ObservationStore()
    assert store.admit([rec(age=16), rec(rssi=-73), rec()]) == 1
    assert store.stats()["filtered"] == 2


def test_duplicate_reports_collapse_in_query():
    store = ObservationStore()
    store.admit([rec(ts=T0, ap=a, rssi=-45) for a in APS[:3]] * 2)
    est = query_location(store, DB, cid(0), Band.BAND24)
    assert est.cardinality_used == 3 and est.landmark.floor == 1


def test_burst_fully_counted():
    store = ObservationStore()
    c = Counters()
    payload = b"".join(_line(ts=T0 + i, client=cid(i % 50), ap=APS[i % 6]) for i in range(10_000))
    store.admit(parse_datagram(payload, c))
    assert c.parsed == 10_000 and store.counters.accepted == 10_000


def test_silent_client_not_localizable():
    res = query_location(ObservationStore(), DB, cid(3), Band.BAND24)
    assert isinstance(res, NotLocalizable) and res.reason == "no observations"
    assert res.to_json() == {"client_id": cid(3), "localizable": False, "reason": "no observations"}


def test_band_without_map_not_localizable():
    store = ObservationStore()
    store.admit([rec(channel=36, ap=APS[0])])
    assert isinstance(query_location(store, DB, cid(0), Band.BAND5), NotLocalizable)


def test_association_floor_without_association_falls_back():
    store = ObservationStore()
    store.admit([rec(ap=APS[4], rssi=-45)])
    est = query_location(store, DB, cid(0), Band.BAND24, Heuristic.ASSOCIATION_FLOOR)
    assert est.fallback and est.requested is Heuristic.ASSOCIATION_FLOOR


def test_association_floor_uses_weak_association_report():
    store = ObservationStore()
    # The association link is below the RSSI floor yet still pins floor 1.
    store.admit([rec(ap=APS[0], assoc="A", rate=54, rssi=-80), rec(ap=APS[4], rssi=-45), rec(ap=APS[1], rssi=-60)])
    est = query_location(store, DB, cid(0), Band.BAND24, Heuristic.ASSOCIATION_FLOOR)
    assert not est.fallback and est.floor == 1


# -- live service -----------------------------------------------------------


@pytest.fixture
def live():
    cfg = ServiceConfig(feed_port=0, api_port=0)
    with LocationService(cfg, db=DB) as svc:
        yield svc


def _get(svc, path):
    host, port = svc.api_address
    try:
        with urllib.request.urlopen(f"http://{host}:{port}{path}", timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_http_endpoints(live):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.sendto(b"".join(_line(ap=a, rssi=-45 - 10 * k) for k, a in enumerate(APS[3:6])) + b"junk\n", live.feed_address)
    assert live.wait_idle()
    status, body = _get(live, f"/v1/location/{cid(0).upper()}?band=Band24")
    assert status == 200 and body["localizable"] and body["floor"] == 2 and body["cardinality_used"] == 3
    assert "server_time_ms" in body
    assert _get(live, f"/v1/location/{cid(1)}")[0] == 404
    assert _get(live, "/v1/location/xyz")[0] == 400
    assert _get(live, f"/v1/location/{cid(0)}?band=Band60")[0] == 400
    assert _get(live, f"/v1/location/{cid(0)}?heuristic=Guess")[0] == 400
    assert _get(live, "/v1/health")[1]["status"] == "ok"
    stats = _get(live, "/v1/stats")[1]
    assert stats["malformed"] == 1 and stats["accepted"] == 3


def test_service_loads_db_from_config(tmp_path):
    save_db(DB, tmp_path / "db.json")
    cfg = ServiceConfig(feed_port=0, api_port=0, db_path=str(tmp_path / "db.json")).validate()
    with LocationService(cfg) as svc:
        assert _get(svc, "/v1/health")[0] == 200
