import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import FIXTURES
from stokesdarcy.cli import main
from stokesdarcy.fem import read_profile_csv, write_profile_csv
from stokesdarcy.harness import ConfigError, RunConfig, compare_profiles, profile_path

COEFFS = os.path.join(FIXTURES, "coefficients_d0.5_m4_h0.05.txt")

SMALL = f"""
[geometry]
eps = 0.25
h_macro = 0.125

[macro]
coefficients = {COEFFS}

[ensemble]
n_samples = 2
n_points = 41
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return str(p)


def strip_times(text):
    return [ln for ln in text.splitlines() if not ln.startswith("# time")]


def test_compare_profiles_metrics():
    rng = np.random.default_rng(3)
    b = rng.normal(size=50)
    m = compare_profiles(b, b)
    assert m["rel_l2"] == 0.0 and m["max"] == 0.0 and m["n"] == 50
    assert compare_profiles(2 * b, b)["rel_l2"] == pytest.approx(1.0, rel=1e-14)
    assert compare_profiles(b + 1.0, b)["mean"] == pytest.approx(1.0)
    a = b.copy()
    a[:5] = np.nan
    assert compare_profiles(a, b)["n"] == 45
    s = np.linspace(0, 1, 50)
    with pytest.raises(ValueError):
        compare_profiles(b, b, s, s + 1e-3)
    with pytest.raises(ValueError):
        compare_profiles(b[:-1], b)
    with pytest.raises(ValueError):
        compare_profiles(np.full(3, np.nan), np.ones(3))


def test_profile_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = np.linspace(0, 1, 30)
    pts = rng.random((30, 2))
    v = rng.normal(size=(30, 2)) * 1e-7
    v[3] = np.nan
    p = rng.normal(size=30)
    path = tmp_path / "prof.csv"
    write_profile_csv(path, s, pts, v, p)
    d = read_profile_csv(path)
    assert list(d) == ["s", "x1", "x2", "v1", "v2", "p"]
    back = np.column_stack([d["v1"], d["v2"]])
    assert np.allclose(back, v, rtol=1e-14, atol=0, equal_nan=True)
    assert np.array_equal(d["p"], p) and np.array_equal(d["x2"], pts[:, 1])


def test_config_loading_and_overrides(small_config, tmp_path):
    cfg = RunConfig.load(small_config, ["ensemble.n_samples=5", "geometry.d=0.4"],
                         out=str(tmp_path / "o"))
    assert cfg.eps == 0.25 and cfg.n_samples == 5 and cfg.d == 0.4
    assert cfg.out == str(tmp_path / "o")
    assert set(cfg.sections) == {"sigma", "x1_0.7"}
    assert cfg.assertion("v1_sigma") == 0.05 and cfg.assertion("ordering", bool) is True
    cfg = RunConfig.load(small_config, ["assertions.v1_sigma=off"])
    assert cfg.assertion("v1_sigma") is None
    p = tmp_path / "sections.ini"
    p.write_text("[sections]\nmid = 0 0.25 1 0.25\n")
    assert RunConfig.load(str(p)).sections == {"mid": ((0.0, 0.25), (1.0, 0.25))}


@pytest.mark.parametrize("bad", [["geometry.eps=0.03"], ["macro.condition_sets=robin"],
                                 ["geometry.d=1.2"], ["ensemble.n_samples=0"],
                                 ["sections.far=0 0 2 0"], ["nodot=1"], ["geometry.m=four"],
                                 ["macro.coefficients=/nonexistent/c.txt"]])
def test_bad_configs_rejected(bad):
    with pytest.raises(ConfigError):
        RunConfig.load(None, bad)


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["coeffs", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["macro", "--set", "geometry.eps=0.3", "--out", str(tmp_path)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_small_pipeline_writes_artifacts(small_config, tmp_path, capsys):
    out = str(tmp_path / "run")
    code = main(["pipeline", "--config", small_config, "--out", out])
    text = open(os.path.join(out, "report.txt")).read()
    assert code == (0 if "overall: PASS" in text else 1)
    for name in ("coefficients.txt", "ensemble_manifest.txt", "report.txt"):
        assert os.path.exists(os.path.join(out, name))
    for model in ("classical", "generalized", "higher_order", "porescale"):
        for sec in ("sigma", "x1_0.7"):
            assert len(read_profile_csv(profile_path(out, model, sec))["s"]) == 41
    assert "v2 ordering along sigma" in text
    # coefficients come from the file
    assert open(os.path.join(out, "coefficients.txt")).read() == open(COEFFS).read()
    # the same run again gives the same report apart from timings
    out2 = str(tmp_path / "run2")
    main(["pipeline", "--config", small_config, "--out", out2])
    assert strip_times(open(os.path.join(out2, "report.txt")).read()) == strip_times(text)


def test_stagewise_commands_match_pipeline(small_config, tmp_path):
    out = str(tmp_path / "stages")
    args = ["--config", small_config, "--out", out]
    assert main(["coeffs"] + args) == 0
    assert main(["macro"] + args) == 0
    assert main(["porescale"] + args) == 0
    code = main(["compare"] + args)
    text = open(os.path.join(out, "report.txt")).read()
    assert code == (0 if "overall: PASS" in text else 1)
    assert "[profiles]" in text


def test_classical_only_config(small_config, tmp_path):
    out = str(tmp_path / "cl")
    main(["pipeline", "--config", small_config, "--out", out,
          "--set", "macro.condition_sets=classical"])
    text = open(os.path.join(out, "report.txt")).read()
    rows = [ln for ln in text.splitlines() if ln.startswith("classical ")]
    assert len(rows) == 6  # two sections x (v1, v2, p)
    assert "ordering" not in text
    assert not os.path.exists(profile_path(out, "generalized", "sigma"))


def test_compare_without_profiles_fails(tmp_path, capsys):
    assert main(["compare", "--out", str(tmp_path / "empty")]) == 1
    assert "missing profile" in capsys.readouterr().err


def test_mms_subcommand(tmp_path):
    out = str(tmp_path / "mms")
    r = subprocess.run([sys.executable, "-m", "stokesdarcy.cli", "mms", "--out", out],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stdout + r.stderr
    text = open(os.path.join(out, "report.txt")).read()
    assert text.startswith("# manufactured-solution convergence study")
    assert text.count("PASS ") == 5 and "overall: PASS" in text
