from __future__ import annotations

import filecmp
import subprocess
import sys

import pytest

from rtlsloc.cli import main
from rtlsloc.feed import serialize_record

from helpers import rec


def _same_tree(a, b) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def survey_db_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("survey")
    assert main(["simulate", "--survey", "--seed", "3", "--dwell", "120", "--out", str(root / "run")]) == 0
    assert main(["fingerprint", "--run", str(root / "run"), "--duration", "120", "--out", str(root / "db.json")]) == 0
    return root / "db.json"


def test_simulate_and_evaluate_are_reproducible(tmp_path, survey_db_path, capsys):
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(["simulate", "--seed", "3", "--duration", "600", "--out", str(run)]) == 0
        assert main(["evaluate", "--run", str(run), "--db", str(survey_db_path), "--heuristic", "Baseline",
                     "--heuristic", "AssociationFloor"]) == 0
    out = capsys.readouterr().out
    assert "mismatch Band24:" in out and "mismatch Band5:" in out
    for f in ("feed.csv", "truth.csv", "aps.csv", "landmarks.csv", "clients.csv", "scenario.json",
              "reports/errors.csv", "reports/mismatch.csv", "reports/scan_stats.csv"):
        assert (tmp_path / "a" / f).is_file()
    assert _same_tree(tmp_path / "a", tmp_path / "b")


def test_fingerprint_empty_feed_directory(tmp_path, capsys):
    (tmp_path / "feeds").mkdir()
    for n in ("v.csv", "a.csv", "l.csv"):
        (tmp_path / n).write_text("")
    rc = main(["fingerprint", "--feeds", str(tmp_path / "feeds"), "--visits", str(tmp_path / "v.csv"),
               "--aps", str(tmp_path / "a.csv"), "--landmarks", str(tmp_path / "l.csv"), "--out", str(tmp_path / "db.json")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "contains no feed files" in err and str(tmp_path / "feeds") in err


def test_evaluate_missing_run(tmp_path, capsys):
    assert main(["evaluate", "--run", str(tmp_path / "nope"), "--db", str(tmp_path / "db.json")]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_classify_appends_frame_class(tmp_path):
    (tmp_path / "in.csv").write_text(serialize_record(rec(rate=6)) + "\nbad line\n" + serialize_record(rec(assoc="A", rate=54)) + "\n")
    assert main(["classify", str(tmp_path / "in.csv"), "-o", str(tmp_path / "out.csv")]) == 0
    lines = (tmp_path / "out.csv").read_text().splitlines()
    assert lines[0].endswith(",frame_class")
    assert [l.rsplit(",", 1)[1] for l in lines[1:]] == ["Scanning", "NonScanning"]
    assert main(["classify", "--strict", str(tmp_path / "in.csv"), "-o", str(tmp_path / "out.csv")]) == 1


def test_serve_config_error_exits_1(tmp_path, capsys):
    assert main(["serve", "--db", str(tmp_path / "missing.json")]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_module_help():
    out = subprocess.run([sys.executable, "-m", "rtlsloc", "--help"], capture_output=True, text=True, check=True).stdout
    for cmd in ("simulate", "fingerprint", "evaluate", "classify", "calibrate", "serve"):
        assert cmd in out
