import csv
import json

import pytest

from ridepool.demand import make_request
from ridepool.engine import Scenario, build_world, run
from ridepool.reporting import (
    TruncatedLog, compute_kpis, read_events, report_for, run_experiment_matrix, saved_distance, write_events,
    write_run_outputs, zonal_summary,
)
from ridepool.scheduling import VehicleState

LINE3 = dict(network="grid:1x3", duration=600, fleet_size=1, t_max_wait=300, rebalancing_period=300,
             horizon=900, demand="uniform", zone_reach_limit=60)
SMALL = dict(network="grid:4x4", fleet_size=3, duration=1200, rebalancing_period=300, horizon=900,
             demand_rate_per_hour=40, t_max_wait=180)


def line_run(start, specs):
    sc = Scenario().with_values(LINE3)
    w = build_world(sc)
    reqs = [make_request(k, o, d, t, w.matrix) for k, (o, d, t) in enumerate(specs)]
    return run(sc, world=w, requests=reqs, fleet=[VehicleState(0, start)])


@pytest.mark.parametrize("fleet,direct,expected", [(100, 100, 0.0), (80, 100, 0.2), (120, 100, -0.2)])
def test_saved_distance_examples(fleet, direct, expected):
    assert saved_distance(fleet, direct) == expected


def test_saved_distance_undefined():
    assert saved_distance(10, 0) is None


def test_no_movement():
    res = line_run(0, [])
    rep = report_for(res)
    assert rep.avg_vehicle_revenue_hours == 0 and rep.vkm == 0 and rep.saved_distance is None
    assert rep.idle_s == res.end_time and rep.time_budget_gap() == 0
    assert rep.avg_waiting_time is None and rep.service_rate == 0


def test_single_request_with_approach():
    # one 500 m edge to the pickup, one 500 m edge with the customer
    rep = report_for(line_run(0, [(1, 2, 0)]))
    assert rep.vkm == 1.0 and rep.empty_vkm == 0.5
    assert rep.saved_distance == 1 - 1.0 / 0.5
    assert rep.avg_waiting_time == 60
    assert rep.avg_detour == 0
    assert rep.avg_vehicle_revenue_hours == pytest.approx(60 / 3600)


def test_pooled_identical_requests():
    without_approach = report_for(line_run(1, [(1, 2, 0), (1, 2, 0)]))
    assert without_approach.saved_distance == 0.5
    with_approach = report_for(line_run(0, [(1, 2, 0), (1, 2, 0)]))
    assert with_approach.saved_distance == 0.0


def strategy_runs():
    out = []
    for strat in ("none", "react", "qt", "hor", "sampling"):
        out.append(run(Scenario().with_values({**SMALL, "rebalancer": strat, "seed": 3})))
    return out


@pytest.fixture(scope="module")
def runs():
    return strategy_runs()


def test_online_counters_match_log(runs):
    for res in runs:
        rep = report_for(res)
        assert res.online["served"] == rep.served_count
        assert res.online["rejected"] == rep.rejected_count
        assert res.online["vkm"] == rep.vkm
        assert res.online["empty_vkm"] == rep.empty_vkm
        assert res.online["rebalancing_vkm"] == rep.rebalancing_vkm
        assert res.online["revenue_s"] / res.scenario.fleet_size / 3600 == rep.avg_vehicle_revenue_hours


def test_kpi_invariants(runs):
    for res in runs:
        rep = report_for(res)
        assert 0 <= rep.service_rate <= 1
        assert rep.rebalancing_vkm <= rep.empty_vkm <= rep.vkm + 1e-12
        assert rep.time_budget_gap() == pytest.approx(0, abs=1e-6)
        assert rep.served_count + rep.rejected_count + rep.open_count == rep.requests
        assert rep == report_for(res)
    assert report_for(runs[0]).rebalancing_vkm == 0
    assert any(report_for(r).rebalancing_vkm > 0 for r in runs[1:])


def test_event_file_round_trip(runs, tmp_path):
    res = runs[-1]
    write_events(res.events, tmp_path / "e.csv")
    back = read_events(tmp_path / "e.csv")
    assert back == res.events
    assert compute_kpis(back, res.requests, res.world.net, 3, res.end_time) == \
           compute_kpis(res.events, res.requests, res.world.net, 3, res.end_time)


def test_truncated_logs_detected(runs):
    res = runs[0]
    ev = res.events
    net = res.world.net
    cut = next(k for k, e in enumerate(ev) if e.kind == "board")
    with pytest.raises(TruncatedLog):
        compute_kpis(ev[:cut + 1], res.requests, net, 3, res.end_time)
    no_board = [e for e in ev if not (e.kind == "board" and e.rid == ev[cut].rid)]
    with pytest.raises(TruncatedLog):
        compute_kpis(no_board, res.requests, net, 3, res.end_time)
    with pytest.raises(TruncatedLog):
        compute_kpis(list(reversed(ev)), res.requests, net, 3, res.end_time)
    with pytest.raises(TruncatedLog, match="vehicles placed"):
        compute_kpis(ev, res.requests, net, 4, res.end_time)


def test_zonal_summary(runs):
    for res in runs:
        rows = zonal_summary(res.events, res.world.zones, res.world.net, res.end_time)
        rep = report_for(res)
        assert sum(r[1] for r in rows) == rep.rejected_count
        assert sum(r[2] for r in rows) * 3600 == pytest.approx(rep.idle_s)


def test_run_outputs(runs, tmp_path):
    res = runs[-1]
    rep = write_run_outputs(res, tmp_path)
    for name in ("kpis.csv", "events.csv", "fleet_states.csv", "zonal.csv", "run_meta.json"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "kpis.csv") as fh:
        row = next(csv.DictReader(fh))
    assert int(row["served_count"]) == rep.served_count and row["rebalancer"] == "sampling"
    meta = json.loads((tmp_path / "run_meta.json").read_text())
    assert meta["seed"] == 3 and meta["config"]["rebalancer"] == "sampling"
    assert len(meta["rebalancing_call_times_s"]) == len(meta["rebalancing_call_clock_s"]) == 4
    with open(tmp_path / "fleet_states.csv") as fh:
        states = list(csv.DictReader(fh))
    assert all(int(s["idle"]) + int(s["en_route"]) + int(s["rebalancing"]) == 3 for s in states)


def test_matrix_empty_sweep(tmp_path):
    rows = run_experiment_matrix(Scenario().with_values(SMALL), {}, [0], tmp_path)
    assert len(rows) == 1 and rows[0]["error"] == ""
    assert (tmp_path / "runs" / "seed-0" / "events.csv").exists()


def test_matrix_product_count(tmp_path):
    base = Scenario().with_values({**SMALL, "duration": 600})
    rows = run_experiment_matrix(base, {"rebalancer": ["none", "react", "qt", "hor", "sampling"]}, [0, 1, 2],
                                 tmp_path, jobs=2)
    assert len(rows) == 15 and all(r["error"] == "" for r in rows)
    with open(tmp_path / "kpis.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 15


def test_matrix_records_failures(tmp_path):
    base = Scenario().with_values({**SMALL, "duration": 300})
    rows = run_experiment_matrix(base, {"requests": ["synthetic", str(tmp_path / "missing.csv")]}, [0], tmp_path)
    assert [bool(r["error"]) for r in rows] == [False, True]
    with pytest.raises(ValueError):
        run_experiment_matrix(base, {"colour": ["red"]}, [0], tmp_path)
