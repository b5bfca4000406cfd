import csv
import io
import json
import subprocess
import sys

import pytest

from anoca import __version__
from anoca.cli import EXIT_DOMAIN, EXIT_INFEASIBLE, EXIT_IO, EXIT_OK, main

from conftest import DATA

CONFIGS = DATA / "configs"
WORKED_FORECAST = """\
tau,p_load_kw,p_pv_kw,c_import,c_export
0,0,5,20,1
1,0,0,20,1
2,0,0,20,10
"""


def test_validate_fixture_by_name_and_path(capsys):
    assert main(["validate", "ieee4"]) == EXIT_OK
    assert main(["validate", "--network", str(DATA / "mesh60.net")]) == EXIT_OK
    assert "ok (" in capsys.readouterr().out


def test_validate_reports_diagnostics(tmp_path, capsys):
    bad = (DATA / "toy2.net").read_text().replace("src house a", "src shed a")
    path = tmp_path / "bad.net"
    path.write_text(bad)
    assert main(["validate", str(path)]) == EXIT_DOMAIN
    assert "unknown-bus" in capsys.readouterr().err


def test_missing_file_and_bad_arguments_are_usage_errors(tmp_path):
    assert main(["validate", str(tmp_path / "nope.net")]) == EXIT_IO
    assert main(["validate"]) == EXIT_IO
    assert main(["powerflow", "--network", "ieee4", "--tol", "0"]) == EXIT_IO
    assert main(["frobnicate"]) == EXIT_IO
    assert main(["simulate", str(tmp_path / "missing.toml")]) == EXIT_IO


def test_powerflow_csv_and_manifest(tmp_path):
    out = tmp_path / "v.csv"
    assert main(["powerflow", "--network", "ieee4", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 12 and rows[0]["bus"] == "1"
    man = json.loads((tmp_path / "v.csv.manifest.json").read_text())
    assert man["subcommand"] == "powerflow" and man["version"] == __version__
    assert any(k.endswith("ieee4.net") for k in man["inputs"])


def test_powerflow_injections_file(tmp_path, capsys):
    inj = tmp_path / "inj.csv"
    inj.write_text("bus,phase,p_kw,q_kvar\nhouse,a,-150,0\n")
    assert main(["powerflow", "--network", "toy2", "--injections", str(inj),
                 "--format", "json"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    house = [v for v in doc["voltages"] if v["bus"] == "house"][0]
    assert house["v_mag_pu"] > 1.0  # exporting raises the voltage
    inj.write_text("bus,phase,p_kw,q_kvar\nnowhere,a,1,0\n")
    assert main(["powerflow", "--network", "toy2", "--injections", str(inj)]) == EXIT_DOMAIN


def test_powerflow_nonconvergence_is_domain_error(capsys):
    assert main(["powerflow", "--network", "toy2", "--load-scale", "2000"]) == EXIT_DOMAIN
    assert "residual" in capsys.readouterr().err


def test_hems_worked_example(tmp_path, capsys):
    fc = tmp_path / "fc.csv"
    fc.write_text(WORKED_FORECAST)
    args = ["hems", "--forecast", str(fc), "--battery", "10,5,1,1,5", "--dt-minutes", "60",
            "--format", "json"]
    assert main(args) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["objective"] == pytest.approx(-50.0)
    assert doc["gap"] == 0.0 and doc["oes_kw"] == 0.0


def test_hems_infeasible_exit_code(tmp_path, capsys):
    fc = tmp_path / "fc.csv"
    fc.write_text(WORKED_FORECAST)
    args = ["hems", "--forecast", str(fc), "--battery", "10,0,1,1,5", "--dt-minutes", "60",
            "--e-initial", "3"]
    assert main(args) == EXIT_INFEASIBLE
    assert "interval 0" in capsys.readouterr().err


def test_hems_battery_from_network(tmp_path):
    fc = tmp_path / "fc.csv"
    fc.write_text(WORKED_FORECAST)
    out = tmp_path / "plan.csv"
    assert main(["hems", "--forecast", str(fc), "--network", "toy2", "--prosumer", "house.a",
                 "--out", str(out)]) == EXIT_OK
    assert out.read_text().startswith("tau,p_charge")


def test_dms_scenario_summary(capsys):
    assert main(["dms", "--network", "ieee4_anoca", "--scenario", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Net. Curtailed Power (kW):" in out
    doc = json.loads(out[:out.rindex("}") + 1])
    assert len(doc["prosumers"]) == 3


def test_dms_setpoint_errors(tmp_path, capsys):
    sp = tmp_path / "sp.csv"
    sp.write_text("bus,phase,oes_kw,ois_kw\n3,a,10,0\n")
    assert main(["dms", "--network", "ieee4_anoca", "--setpoints", str(sp)]) == EXIT_DOMAIN
    sp.write_text("bus,phase,oes_kw,ois_kw\nhouse,a,1,900\n")
    toy = (DATA / "toy2.net").read_text().replace("house a 40.0 10.0", "house a 400.0 100.0")
    net = tmp_path / "toy.net"
    net.write_text(toy)
    assert main(["dms", "--network", str(net), "--setpoints", str(sp)]) == EXIT_INFEASIBLE
    assert "most violated constraint" in capsys.readouterr().err


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = str(CONFIGS / "ieee4_s3.toml")
    assert main(["simulate", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["simulate", cfg, "--out", str(b)]) == EXIT_OK
    assert (a / "steps.jsonl").read_bytes() == (b / "steps.jsonl").read_bytes()
    man = json.loads((a / "manifest.json").read_text())
    assert man["seeds"]["forecast_noise"] == 7
    assert len((a / "summary.csv").read_text().splitlines()) == 4


def test_simulate_overrides_and_bad_config(tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", str(CONFIGS / "toy2_zero_pv.toml"), "--seed", "3", "--strategy",
                 "linf", "--out", str(out)]) == EXIT_OK
    cfg = tmp_path / "bad.toml"
    cfg.write_text('[simulation]\nnetwork = "toy2"\nspan = "x"\n[scenario]\nid = 1\n')
    assert main(["simulate", str(cfg), "--out", str(out)]) == EXIT_IO


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "anoca", "--version"], capture_output=True,
                         text=True, check=False)
    assert res.returncode == 0 and __version__ in res.stdout
