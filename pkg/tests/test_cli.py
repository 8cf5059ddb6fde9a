import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from rbal.cli import RunConfig, main
from rbal.errors import ConfigError


def _run(*args):
    return main([str(a) for a in args])


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- configuration


def test_flags_override_file(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"k": 3, "solver": {"tol": 1e-6, "seed": 4}}))
    cfg = RunConfig.from_sources(str(cfg_file), {"k": 5, "tol": None})
    assert cfg.k == 5 and cfg.tol == 1e-6 and cfg.seed == 4


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"solver": {"tolerance": 1}}, {"k": "four"}, {"k": True}])
def test_schema_rejections(tmp_path, doc):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        RunConfig.from_sources(str(cfg_file), {})


@pytest.mark.parametrize("flags", [{"k_range": "5:3"}, {"grid": "64"}, {"geometry": "torus"}, {"geometry": "file"}])
def test_flag_rejections(flags):
    with pytest.raises(ConfigError):
        RunConfig.from_sources(None, flags)


def test_unknown_config_key_exit(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"geometry": {"kind": "p1", "colour": "red"}}))
    assert _run("balance", "--config", cfg_file, "--k", 2, "--out", tmp_path / "o") == 1


# ---------------------------------------------------------------- balance and relative


def test_balance_converges(tmp_path):
    out = tmp_path / "b4"
    assert _run("balance", "--geometry", "p1", "--k", 4, "--tol", "1e-10", "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["final_balanced_residual"] < 1e-10 and rep["seed"] == 0
    H = json.loads((out / "H.json").read_text())
    assert H["level_k"] == 4
    rows = _csv(out / "residuals.csv")
    assert rows[0] == ["iteration", "balanced_residual", "relative_residual"]
    assert float(rows[-1][1]) < 1e-10


def test_balance_missing_k(tmp_path, capsys):
    assert _run("balance", "--geometry", "p1", "--out", tmp_path) == 1
    assert "usage" in capsys.readouterr().err


def test_balance_max_iter_exit(tmp_path):
    assert _run("balance", "--k", 4, "--max-iter", 1, "--out", tmp_path) == 2


def test_relative_torus_on(tmp_path):
    out = tmp_path / "r"
    assert _run("relative", "--geometry", "p1", "--k", 4, "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["final_relative_residual"] < 1e-8
    assert (out / "B_matrix.json").exists()


def test_relative_torus_off_matches_balance(tmp_path):
    assert _run("relative", "--k", 3, "--torus", "off", "--out", tmp_path / "r") == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    # with V(T) empty the relative target is the balanced one
    assert rep["final_balanced_residual"] < 1e-8
    B = np.array(json.loads((tmp_path / "r" / "B_matrix.json").read_text())["entries"])
    assert not B.any()


def test_relative_file_without_weights(tmp_path):
    assert _run("export-frame", "--k", 2, "--grid", "16x32", "--out", tmp_path / "f") == 0
    path = tmp_path / "f" / "frame.json"
    doc = json.loads(path.read_text())
    doc.pop("torus_weights")
    path.write_text(json.dumps(doc))
    assert _run("relative", "--geometry", f"file:{path}", "--out", tmp_path / "r") == 1
    assert _run("balance", "--geometry", f"file:{path}", "--out", tmp_path / "b") == 0


# ---------------------------------------------------------------- expansion


def test_expansion_tyz(tmp_path):
    out = tmp_path / "e"
    assert _run("expansion", "tyz", "--k-range", "4:16", "--out", out) == 0
    fit = json.loads((out / "fit.json").read_text())
    assert "exponent" in fit and np.isfinite(fit["exponent"])
    assert _csv(out / "series.csv")[0] == ["k", "value", "profile_correlation"]


def test_expansion_single_k(tmp_path):
    assert _run("expansion", "tyz", "--k-range", "4:4", "--out", tmp_path) == 1


def test_expansion_bad_observable(tmp_path):
    assert _run("expansion", "bogus", "--k-range", "4:8", "--out", tmp_path) == 1


def test_expansion_reproducible(tmp_path):
    for name in ("a", "b"):
        assert _run("expansion", "ca", "--k-range", "2:8", "--seed", 7, "--out", tmp_path / name) == 0
    for f in ("fit.json", "series.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_expansion_two_order_layout(tmp_path):
    assert _run("expansion", "thm2", "--k-range", "4:6", "--out", tmp_path) == 0
    assert (tmp_path / "l0" / "fit.json").exists() and (tmp_path / "l1" / "fit.json").exists()


# ---------------------------------------------------------------- stability


def test_stability_eig(tmp_path):
    assert _run("stability", "eig", "--k-range", "2:8", "--samples", 20, "--out", tmp_path) == 0
    rows = _csv(tmp_path / "report.csv")
    assert rows[0] == ["k", "sample_id", "ratio"]
    assert min(float(r[2]) for r in rows[1:]) > 0
    assert {int(r[0]) for r in rows[1:]} == set(range(2, 9))


def test_stability_destab_none(tmp_path):
    assert _run("stability", "destab", "--k", 3, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["per_k"][0]["destabilizer"] == "none"


def test_stability_bad_report(tmp_path):
    assert _run("stability", "bogus", "--k", 3, "--out", tmp_path) == 1


def test_stability_from_input(tmp_path):
    assert _run("balance", "--k", 3, "--out", tmp_path / "b") == 0
    assert _run("stability", "distortion", "--k", 3, "--input", tmp_path / "b" / "H.json",
                "--out", tmp_path / "s") == 0
    rep = json.loads((tmp_path / "s" / "report.json").read_text())
    assert rep["per_k"][0]["solve_status"] == "input" and rep["per_k"][0]["gate_pass"]


# ---------------------------------------------------------------- entry point


@pytest.mark.skipif(shutil.which("rbal") is None, reason="console script not installed")
def test_console_script_exit_codes(tmp_path):
    ok = subprocess.run(["rbal", "balance", "--k", "2", "--out", str(tmp_path)], capture_output=True)
    bad = subprocess.run(["rbal", "balance", "--out", str(tmp_path)], capture_output=True)
    assert ok.returncode == 0 and bad.returncode == 1
