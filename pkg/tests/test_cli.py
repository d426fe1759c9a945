import hashlib
import json
import subprocess
import sys

import pytest

from vstab.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, main
from vstab.netmodel import _two_bus_dict, bundled_path
from vstab.qds import save_profiles

from conftest import one_load_profiles


def _sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


@pytest.fixture
def two_bus_files(tmp_path):
    net = tmp_path / "two_bus.json"
    d = _two_bus_dict(0.2)
    net.write_text(json.dumps(d))
    return net


def test_validate_bundled(capsys):
    assert main(["validate", "--network", str(bundled_path("ieee39.json"))]) == EXIT_OK
    assert "39 buses" in capsys.readouterr().out


def test_bundled_names_resolve(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["validate", "--network", "ieee39.json"]) == EXIT_OK
    assert main(["rms", "--contingencies", "ieee39_contingencies_mild.json", "--t-end", "1.5",
                 "--out", "r"]) == EXIT_OK
    assert (tmp_path / "r" / "rms_bus_16_short_fault.csv").exists()
    assert main(["validate", "--network", "nope.json"]) == EXIT_INPUT
    assert "nope.json" in capsys.readouterr().err


def test_validate_broken(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    d = _two_bus_dict()
    d["branches"][0]["to"] = 7
    bad.write_text(json.dumps(d))
    assert main(["validate", "--network", str(bad)]) == EXIT_INPUT
    assert "input error" in capsys.readouterr().err


def test_missing_profiles(tmp_path, capsys):
    missing = tmp_path / "missing.csv"
    assert main(["qds", "--profiles", str(missing), "--out", str(tmp_path / "q")]) == EXIT_INPUT
    assert "missing.csv" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert main(["qds", "--bogus"]) == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def test_console_script_exit_codes(tmp_path):
    r = subprocess.run([sys.executable, "-m", "vstab.cli", "plan"], capture_output=True, text=True)
    assert r.returncode == 2
    r = subprocess.run([sys.executable, "-m", "vstab.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("vstab ")


def test_powerflow_manifest(tmp_path):
    out = tmp_path / "pf.csv"
    assert main(["powerflow", "--out", str(out)]) == EXIT_OK
    man = json.loads((tmp_path / "pf.csv.powerflow_manifest.json").read_text())
    assert man["exit_code"] == 0
    assert man["outputs"] == [{"path": "pf.csv", "sha256": _sha(out), "bytes": out.stat().st_size}]
    net = str(bundled_path("ieee39.json"))
    assert man["inputs"] == {net: _sha(bundled_path("ieee39.json"))}


def test_synth_profiles(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth-profiles", "--horizon", "48", "--seed", "9", "--out", str(a)]) == EXIT_OK
    assert main(["synth-profiles", "--horizon", "48", "--seed", "9", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) > 48


def test_qds_violations_qv(tmp_path, two_bus_files):
    prof = tmp_path / "p.csv"
    save_profiles(one_load_profiles([0.9, 1.2, 0.9], [0.1, 0.1, 0.1]), prof)
    net = str(two_bus_files)
    assert main(["qds", "--network", net, "--profiles", str(prof), "--jobs", "1", "--out", str(tmp_path / "q")]) == 0
    man = json.loads((tmp_path / "q" / "qds_manifest.json").read_text())
    assert {o["path"] for o in man["outputs"]} == {"qds_voltages.csv", "qds_meta.json"}
    assert str(prof) in man["inputs"]
    viol = tmp_path / "v.csv"
    assert main(["violations", "--series", str(tmp_path / "q" / "qds_voltages.csv"), "--out", str(viol)]) == 0
    rows = viol.read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("2,")
    assert main(["qv", "--network", net, "--profiles", str(prof), "--hour", "1", "--bus", "2",
                 "--target", "0.9975", "--out", str(tmp_path / "qv")]) == 0
    dq = json.loads((tmp_path / "qv" / "qv_demand.json").read_text())
    assert dq["dq_mvar"] > 0


def test_plan_step1_infeasible(tmp_path, two_bus_files):
    prof = tmp_path / "p.csv"
    save_profiles(one_load_profiles([1.2, 6.0, 1.2], [0.2, 0.3, 0.2]), prof)
    out = tmp_path / "plan"
    code = main(["plan-step1", "--network", str(two_bus_files), "--profiles", str(prof), "--jobs", "1",
                 "--no-plots", "--out", str(out)])
    assert code == EXIT_FAIL
    info = json.loads((out / "infeasibility.json").read_text())
    assert info["step"] == 1 and info["skipped"]
    assert (out / "plan-step1_manifest.json").exists()


def test_plan_two_bus(tmp_path, two_bus_files):
    prof = tmp_path / "p.csv"
    save_profiles(one_load_profiles([0.9, 1.2, 0.9], [0.1, 0.1, 0.1]), prof)
    out = tmp_path / "plan"
    assert main(["plan", "--network", str(two_bus_files), "--profiles", str(prof), "--jobs", "1",
                 "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert rep["verified"] and rep["step1"]["n_iterations"] == 2
    assert (out / "final" / "qds_voltages.png").exists()
    assert (out / "step1" / "iter_01" / "qv_curve_2_1.png").exists()
    man = json.loads((out / "plan_manifest.json").read_text())
    listed = {o["path"]: o["sha256"] for o in man["outputs"]}
    assert listed["report.json"] == _sha(out / "report.json")
    # step-wise commands give the same step-1 result
    assert main(["plan-step1", "--network", str(two_bus_files), "--profiles", str(prof), "--jobs", "1",
                 "--no-plots", "--out", str(tmp_path / "s")]) == EXIT_OK
    s1 = json.loads((tmp_path / "s" / "step1_report.json").read_text())
    assert s1 == rep["step1"]
    assert main(["plan-step2", "--network", str(tmp_path / "s" / "network_step1.json"), "--profiles", str(prof),
                 "--step1", str(tmp_path / "s" / "step1_report.json"), "--jobs", "1", "--no-plots",
                 "--out", str(tmp_path / "s")]) == EXIT_OK


def test_bad_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"marjin": 0.1}))
    assert main(["plan-step1", "--config", str(cfg), "--horizon", "24", "--out", str(tmp_path / "o")]) == EXIT_INPUT
