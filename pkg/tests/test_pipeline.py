from __future__ import annotations

import pytest

from rtlsloc.model import Band
from rtlsloc.pipeline import (
    FEED_FILE,
    TRUTH_FILE,
    Calibration,
    calibrate,
    evaluate_records,
    load_calibration,
    load_run,
    save_calibration,
    truth_log,
    write_reports,
    write_run,
)
from rtlsloc.simulator import desk_scenario, run_ground_truth

from helpers import survey


def test_run_directory_roundtrip(tmp_path):
    sc = desk_scenario(seed=5, duration_s=600)
    res = run_ground_truth(sc)
    write_run(sc, res, tmp_path / "run")
    data = load_run(tmp_path / "run")
    assert data.records == res.records
    assert len(data.truth) == len(res.truth)
    assert sorted(data.states.values()) == sorted(s.value for s in res.clients.values())
    assert data.directory.ids() == sc.directory().ids()
    assert data.malformed == 0


def test_load_run_names_missing_file(tmp_path):
    sc = desk_scenario(seed=5, duration_s=60)
    write_run(sc, run_ground_truth(sc), tmp_path)
    (tmp_path / TRUTH_FILE).unlink()
    with pytest.raises(FileNotFoundError, match=TRUTH_FILE):
        load_run(tmp_path)
    with pytest.raises(FileNotFoundError, match="does not exist"):
        load_run(tmp_path / "nope")


def test_malformed_feed_lines_are_counted(tmp_path):
    sc = desk_scenario(seed=5, duration_s=120)
    write_run(sc, run_ground_truth(sc), tmp_path)
    with open(tmp_path / FEED_FILE, "a") as fh:
        fh.write("garbage\n")
    assert load_run(tmp_path).malformed == 1


def test_reports_written(tmp_path):
    sc = desk_scenario(seed=0, duration_s=900)
    res = run_ground_truth(sc)
    bundle = evaluate_records(res.records, truth_log(res), survey(0),
                              states={c: s.value for c, s in res.clients.items()})
    paths = write_reports(bundle, tmp_path)
    assert all(p.is_file() for p in paths)
    assert len(bundle.errors) == 2 * 4 * 3
    header = (tmp_path / "errors.csv").read_text().splitlines()[0]
    assert header.startswith("band,heuristic,class_filter,cardinality,p50_m")


def test_calibration_json_roundtrip(tmp_path):
    cal = Calibration({Band.BAND24: 0.3, Band.BAND5: 1.1}, {Band.BAND24: 57.3, Band.BAND5: 30.6}, (1, 2),
                      [{"intensity": 0.3, "Band24": 55.0, "Band5": 20.0}])
    save_calibration(cal, tmp_path / "c.json")
    back = load_calibration(tmp_path / "c.json")
    assert back.intensity == cal.intensity and back.targets == cal.targets and back.table == cal.table


def test_calibrate_picks_closest_grid_point():
    cal = calibrate(seeds=(7,), grid=(0.0, 2.0), factory=lambda seed, **kw: desk_scenario(seed=seed, duration_s=1200, **kw))
    assert [row["intensity"] for row in cal.table] == [0.0, 2.0]
    for b, target in cal.targets.items():
        best = min(cal.table, key=lambda r: abs(r[b.value] - target))
        assert cal.intensity[b] == best["intensity"]
