import json
import subprocess
import sys
import time

import jsonschema
import numpy as np
import pytest

import gelboot.montecarlo as mcmod
from gelboot import rng as rngmod
from gelboot.cli import load_schema, main
from gelboot.dgp import DgpSpec, simulate
from gelboot.models import Dataset, write_csv


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def panel_files(tmp_path):
    data = simulate(DgpSpec("C1", 4, 120), rngmod.stream(31, 0))
    csv = tmp_path / "panel.csv"
    write_csv(data, csv, with_id=True)
    return str(csv), write_json(tmp_path / "panel.json", {"model": "panel", "T": 4})


@pytest.fixture
def iv_files(tmp_path):
    rng = np.random.default_rng(4)
    x = rng.normal(size=200)
    y = 1.0 + 0.5 * x + rng.normal(size=200) * (1 + 0.5 * np.abs(x))
    csv = tmp_path / "iv.csv"
    write_csv(Dataset(np.column_stack([y, x]), ("y", "x1")), csv)
    return str(csv), write_json(tmp_path / "iv.json", {"model": "linear_iv", "y": "y", "x": ["const", "x1"]})


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_estimate_all_kinds_panel(panel_files, tmp_path, capsys):
    out = tmp_path / "est.json"
    code, stdout, _ = run(["estimate", *panel_files, "--kind", "all", "--out", out], capsys)
    assert code == 0
    rep = json.loads(out.read_text())
    jsonschema.validate(rep, load_schema("estimate_report"))
    assert [e["kind"] for e in rep["estimates"]] == ["EL", "ET", "ETEL"]
    for e in rep["estimates"]:
        assert len(e["se_C"]) == len(e["se_MR"]) == 1
        assert {j["variant"] for j in e["j_tests"]} == {"GMM-J", "LR-EL", "LR-ET", "LR-ETEL"}
    assert "ubc" in rep["estimates"][0]
    assert "s.e. MR" in stdout


def test_just_identified_standard_errors_agree(iv_files, capsys):
    code, stdout, _ = run(["estimate", *iv_files, "--kind", "ET"], capsys)
    assert code == 0
    e = json.loads(stdout)["estimates"][0]
    np.testing.assert_allclose(e["se_C"], e["se_MR"], atol=1e-6)
    assert e["j_tests"] == []


def test_matching_fixture_runs_all_kinds(iv_files, tmp_path, capsys):
    data, _ = iv_files
    desc = write_json(
        tmp_path / "match.json",
        {"model": "matching", "y": "y", "x": ["const", "x1"], "moments": [["x1", "x1"], ["y"]], "targets": [1.0, 1.0]},
    )
    code, stdout, _ = run(["estimate", data, desc, "--kind", "all"], capsys)
    assert code == 0
    rep = json.loads(stdout)
    assert rep["l_g"] == 4 and len(rep["estimates"]) == 3
    assert all(e["converged"] for e in rep["estimates"])


def test_input_errors_exit_2(panel_files, tmp_path, capsys):
    code, _, err = run(["estimate", tmp_path / "missing.csv", panel_files[1]], capsys)
    assert code == 2
    jsonschema.validate(json.loads(err), load_schema("error"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["estimate", panel_files[0], bad], capsys)[0] == 2
    assert run(["estimate", *panel_files, "--kind", "XX"], capsys)[0] == 2
    assert run(["bootstrap", *panel_files, "--B", "0"], capsys)[0] == 2
    empty = tmp_path / "empty.csv"
    empty.write_text("t_star\n")
    assert run(["kde", empty], capsys)[0] == 2
    cfg = write_json(tmp_path / "cfg.json", {"bogus": 1})
    assert run(["estimate", *panel_files, "--config", cfg], capsys)[0] == 2


def test_numeric_failure_exit_3(tmp_path, capsys):
    csv = tmp_path / "flat.csv"
    write_csv(Dataset(np.column_stack([np.arange(20.0), np.zeros(20)]), ("y", "x1")), csv)
    desc = write_json(tmp_path / "m.json", {"model": "linear_iv", "y": "y", "x": ["x1"], "z": ["x1", "const"]})
    code, _, err = run(["estimate", csv, desc], capsys)
    assert code == 3
    assert json.loads(err)["exit_code"] == 3


def _boot(files, tmp_path, capsys, *extra):
    out = tmp_path / f"boot{time.perf_counter_ns()}.json"
    code, _, _ = run(["bootstrap", *files, "--out", out, *extra], capsys)
    assert code == 0
    rep = json.loads(out.read_text())
    jsonschema.validate(rep, load_schema("bootstrap_report"))
    return rep


def test_bootstrap_deterministic_and_endpoints(panel_files, tmp_path, capsys):
    a = _boot(panel_files, tmp_path, capsys, "--B", 49, "--seed", 8)
    b = _boot(panel_files, tmp_path, capsys, "--B", 49, "--seed", 8)
    assert a["intervals"] == b["intervals"]
    th, se, cv = a["theta_hat"], a["se_MR"], a["critical_values"]
    lo, hi = a["intervals"]["symmetric"]
    assert abs(lo - (th - cv["z_absT_alpha"] * se)) < 1e-12
    assert abs(hi - (th + cv["z_absT_alpha"] * se)) < 1e-12
    lo, hi = a["intervals"]["equal_tailed"]
    assert abs(lo - (th - cv["z_T_alpha_half"] * se)) < 1e-12
    assert abs(hi - (th - cv["z_T_one_minus_alpha_half"] * se)) < 1e-12
    assert a["intervals"]["one_sided"][1] is None or a["intervals"]["one_sided"][1] == float("inf")


def test_bootstrap_single_replicate(panel_files, tmp_path, capsys):
    tcsv = tmp_path / "t.csv"
    rep = _boot(panel_files, tmp_path, capsys, "--B", 1, "--t-star-out", tcsv)
    t1 = float(tcsv.read_text().splitlines()[1])
    lo, hi = rep["intervals"]["symmetric"]
    assert (hi - lo) / 2 == pytest.approx(abs(t1) * rep["se_MR"], rel=1e-12)


def test_bootstrap_wald_and_kde(panel_files, tmp_path, capsys):
    tcsv = tmp_path / "t.csv"
    rep = _boot(panel_files, tmp_path, capsys, "--B", 30, "--restriction", '{"R": [[1.0]], "c": [0.4]}', "--scheme", "BN", "--t-star-out", tcsv)
    assert rep["wald"]["critical_value"] == rep["critical_values"]["z_W_alpha"]
    assert rep["scheme"] == "BN"
    kde_out = tmp_path / "kde.csv"
    assert run(["kde", tcsv, "--out", kde_out], capsys)[0] == 0
    rows = np.loadtxt(kde_out, delimiter=",", skiprows=1)
    assert rows.shape == (512, 2)
    assert np.trapezoid(rows[:, 1], rows[:, 0]) == pytest.approx(1.0, abs=1e-3)


def test_mc_smoke(tmp_path, capsys):
    cfg = {"dgp": {"name": "C1", "T": 4, "n": 50}, "reps": 10, "seed": 2}
    path = write_json(tmp_path / "mc.json", cfg)
    t0 = time.perf_counter()
    code, stdout, _ = run(["mc", path, "--out-dir", tmp_path / "o1"], capsys)
    assert code == 0 and time.perf_counter() - t0 < 60
    man = json.loads((tmp_path / "o1" / "manifest.json").read_text())
    jsonschema.validate(man, load_schema("manifest"))
    for k, v in cfg["dgp"].items():
        assert man["config"]["dgp"][k] == v
    assert man["config"]["reps"] == 10 and man["seed"] == 2
    assert run(["mc", path, "--out-dir", tmp_path / "o2"], capsys)[0] == 0
    a = (tmp_path / "o1" / "table.csv").read_text().splitlines()[2:]
    b = (tmp_path / "o2" / "table.csv").read_text().splitlines()[2:]
    assert a == b
    assert "| Boot | EL | MR | L |" in stdout


def test_mc_flagged_rows_exit_4(tmp_path, capsys, monkeypatch):
    real = mcmod.run_warp_speed

    def flagged(cfg, progress=None):
        t = real(cfg)
        t.rows[0].flagged = True
        return t

    monkeypatch.setattr(mcmod, "run_warp_speed", flagged)
    path = write_json(tmp_path / "mc.json", {"dgp": {"name": "C1", "T": 4, "n": 40}, "reps": 2, "kinds": ["EL"]})
    code, _, err = run(["mc", path, "--out-dir", tmp_path / "o"], capsys)
    assert code == 4
    assert (tmp_path / "o" / "table.csv").exists()
    assert json.loads(err)["exit_code"] == 4


def test_mc_bad_config_exit_2(tmp_path, capsys):
    path = write_json(tmp_path / "mc.json", {"dgp": {"name": "C1", "T": 4, "n": 40}, "reps": 0})
    assert run(["mc", path], capsys)[0] == 2


def test_pseudo_true_report(tmp_path, capsys):
    out = tmp_path / "pt.json"
    code, _, _ = run(["pseudo-true", "--kinds", "GMM", "--n-large", 2000, "--out", out], capsys)
    assert code == 0
    rep = json.loads(out.read_text())
    jsonschema.validate(rep, load_schema("pseudo_true_report"))
    assert rep["rho_b"] == pytest.approx(1.1) and rep["n_used"] == 2000


def test_console_script_and_env_threads(panel_files, tmp_path):
    env = {"GELBOOT_THREADS": "2", "PATH": "/usr/bin:/bin"}
    out = tmp_path / "b.json"
    proc = subprocess.run(
        [sys.executable, "-m", "gelboot.cli", "bootstrap", *panel_files, "--B", "8", "--out", str(out)],
        capture_output=True, text=True, env=env, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    serial = subprocess.run(
        [sys.executable, "-m", "gelboot.cli", "bootstrap", *panel_files, "--B", "8", "--out", str(out) + "1"],
        capture_output=True, text=True, env={**env, "GELBOOT_THREADS": "1"}, timeout=120,
    )
    assert serial.returncode == 0
    assert json.loads(out.read_text())["intervals"] == json.loads((tmp_path / "b.json1").read_text())["intervals"]
