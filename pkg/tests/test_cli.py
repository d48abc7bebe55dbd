import json
import os

import numpy as np
import pytest

from superloc import cli, experiments
from superloc.fem import NumericalFailure

TINY = {
    "experiment": "localization",
    "method": "both",
    "H": [0.125],
    "r": 4,
    "ell": [1],
    "n": [4],
    "p": [0],
    "coefficient": {"kind": "random_checkerboard", "eps_cells": 8},
    "source": {"kind": "constant_one"},
    "output": "tiny.csv",
}


def write_config(tmp_path, **changes):
    raw = dict(TINY, **changes)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return str(path)


def test_validate_ok(tmp_path, capsys):
    assert cli.main(["validate", write_config(tmp_path)]) == 0
    assert "ok" in capsys.readouterr().out


@pytest.mark.parametrize("changes", [
    {"experiment": "other"},
    {"method": "fem"},
    {"H": [0.3]},
    {"ell": [4]},  # SLOD patch would cover the domain
    {"p": [5]},
    {"n": [0]},
    {"h": 0.01, "r": None},
    {"coefficient": {"kind": "random_checkerboard", "eps_cells": 3}},
    {"source": {"kind": "gaussian"}},
    {"bogus": 1},
])
def test_config_errors(tmp_path, changes, capsys):
    raw = dict(TINY, **changes)
    if raw.get("r") is None:
        raw.pop("r", None)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    assert cli.main(["validate", str(path)]) == 2
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert cli.main(["validate", str(bad)]) == 2
    assert cli.main(["validate", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["run", write_config(tmp_path), "--threads", "0"]) == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericalFailure("singular")
    monkeypatch.setattr(experiments, "run", boom)
    assert cli.main(["run", write_config(tmp_path), "--out", str(tmp_path)]) == 3


def test_slgfem_ell_may_cover_domain(tmp_path):
    assert cli.main(["validate", write_config(tmp_path, method="slgfem", ell=[4])]) == 0


def test_run_writes_csv_and_log(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", write_config(tmp_path), "--out", str(out)]) == 0
    rows = experiments.read_csv(out / "tiny.csv")
    assert list(rows[0].keys()) == list(experiments.CSV_HEADER)
    assert [r["method"] for r in rows] == ["slgfem", "slod"]
    assert all(r["wall_ms"] == "" for r in rows)
    assert rows[1]["n"] == "" and rows[0]["sigma"] == ""
    assert float(rows[1]["riesz_lo"]) <= float(rows[1]["riesz_hi"])
    assert 0 < float(rows[0]["e_rel"]) < 1
    assert (out / "tiny.log").read_text().count("e_rel=") == 2
    leftovers = [f for f in os.listdir(out) if f.endswith(".tmp")]
    assert not leftovers


def test_run_threads_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = write_config(tmp_path)
    assert cli.main(["run", cfg, "--out", str(a), "--threads", "1"]) == 0
    assert cli.main(["run", cfg, "--out", str(b), "--threads", "3"]) == 0
    assert (a / "tiny.csv").read_bytes() == (b / "tiny.csv").read_bytes()


def test_record_timing(tmp_path):
    assert cli.main(["run", write_config(tmp_path), "--out", str(tmp_path), "--record-timing"]) == 0
    rows = experiments.read_csv(tmp_path / "tiny.csv")
    assert all(float(r["wall_ms"]) > 0 for r in rows)


def test_spectrum(tmp_path, capsys):
    assert cli.main(["spectrum", write_config(tmp_path), "--out", str(tmp_path)]) == 0
    rows = experiments.read_csv(tmp_path / "tiny_spectrum.csv")
    slod_rows = [r for r in rows if r["method"] == "slod"]
    gfem_rows = [r for r in rows if r["method"] == "slgfem"]
    assert len(slod_rows) == 9  # K = 9 elements x J = 1
    assert {r["marker"] for r in slod_rows} == {"9"}
    vals = [float(r["value"]) for r in gfem_rows]
    assert vals == sorted(vals, reverse=True) and all(v > 0 for v in vals)
    assert "selected from k=9" in capsys.readouterr().out


def test_full_scale_profile(tmp_path):
    cfg = experiments.ExperimentConfig.load(write_config(tmp_path, r=None, h=2.0**-7))
    full = cfg.with_full_scale()
    assert full.fine_cells(8) == 1024
    assert full.coefficient_spec().eps_cells == 256


def test_atomic_write_keeps_old_file_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "x.csv"
    target.write_text("old")

    def fail(*args):
        raise OSError("disk full")
    monkeypatch.setattr(experiments.os, "replace", fail)
    with pytest.raises(OSError):
        experiments._atomic_write(target, "new")
    assert target.read_text() == "old"
    assert os.listdir(tmp_path) == ["x.csv"]


def test_fit_slope():
    H = np.array([0.25, 0.125, 0.0625])
    assert np.isclose(experiments.fit_slope(H, H**2), 2.0)
    assert np.isclose(experiments.fit_slope(H, np.full(3, 0.3)), 0.0, atol=1e-12)
    assert np.isclose(experiments.fit_slope([0.25, 0.125], [1e-2, 2.5e-3]), 2.0)
    series = [6.45e-4, 3.22e-5, 1.73e-6, 2.97e-7]
    assert abs(experiments.fit_slope(1.0 / np.array([4, 8, 16, 32]), series) - 3.8) < 0.1
    with pytest.raises(ValueError):
        experiments.fit_slope([0.25], [0.1])
    with pytest.raises(ValueError):
        experiments.fit_slope([0.25, 0.25], [0.1, 0.2])
    with pytest.raises(ValueError):
        experiments.fit_slope([0.25, 0.125], [0.1, 0.0])


def test_csv_float_roundtrip():
    row = experiments.ResultRow(method="slgfem", d=2, H=0.0625, r=8, ell=2, n=10, p=0, kappa=None,
                                seed=0, e_rel=0.1 + 0.2, wall_ms=12.5, patch_solves=7)
    text = experiments.csv_text([row])
    assert "0.30000000000000004" in text
    assert ",12.5," not in text
    assert ",12.5," in experiments.csv_text([row], record_timing=True)
