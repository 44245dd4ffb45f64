import csv
import json

from ridepool.cli import main
from ridepool.network import grid_network, load_zones, write_network

QUICK = ["--set", "network=grid:3x3", "--set", "fleet_size=2", "--set", "duration=600",
         "--set", "rebalancing_period=300", "--set", "horizon=600"]


def test_simulate_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["simulate", *QUICK, "--seed", "4", "--out", str(out)]) == 0
    assert "served" in capsys.readouterr().out
    assert json.loads((out / "run_meta.json").read_text())["seed"] == 4
    assert (out / "kpis.csv").exists() and (out / "events.csv").exists()


def test_validate_prints_resolved_config(tmp_path, capsys):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("fleet_size = 9\n")
    assert main(["validate", "--config", str(cfg), "--set", "rebalancer=qt"]) == 0
    text = capsys.readouterr().out
    assert "fleet_size = 9" in text and "rebalancer = qt" in text


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("fleet_size = -3\n")
    assert main(["validate", "--config", str(cfg)]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["simulate", "--set", "colour=red", "--out", str(tmp_path / "x")]) == 2


def test_sweep(tmp_path):
    out = tmp_path / "sweep"
    code = main(["sweep", *QUICK, "--sweep", "rebalancer=none,qt", "--seeds", "0,1", "--out", str(out)])
    assert code == 0
    with open(out / "kpis.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and {r["rebalancer"] for r in rows} == {"none", "qt"}


def test_zones(tmp_path):
    write_network(grid_network(1, 6), tmp_path / "net")
    out = tmp_path / "zones.csv"
    assert main(["zones", "--network", str(tmp_path / "net"), "--reach-limit", "60", "--out", str(out)]) == 0
    zones = load_zones(out)
    assert sorted(n for z in zones for n in z.members) == list(range(6))
    assert all(z.centroid in z.members for z in zones)
