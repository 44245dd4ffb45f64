import itertools
import random

import numpy as np
import pytest

from oracles import enumerate_rebalancing
from ridepool.demand import ForecastMatrix, sample_requests
from ridepool.network import TravelTimeMatrix, ZoneSystem, assign_nodes_to_zones, grid_network
from ridepool.rebalancing import (
    STRATEGIES, HorRebalancer, QTRebalancer, ReactRebalancer, RebalancingContext, RebalancingProblem,
    RebalancingSolution, SampledTour, SamplingRebalancer, build_and_solve_rebalancing, dispatch_rebalancing,
    hor_flows, hor_rebalance, make_rebalancer, qt_flows, qt_rebalance, react_rebalance, simulate_future_states,
    simulate_sample,
)
from ridepool.scheduling import ServiceConstraints, VehicleState

A, B, C = 0, 1, 2
RHO = -1e6 + 300
CONS = ServiceConstraints(t_max_wait=300, max_rel_detour=0.5, capacity=4)


@pytest.fixture(scope="module")
def line():
    """1 x 6 line (60 s edges) split into zone 0 = {0,1,2} and zone 1 = {3,4,5}."""
    m = TravelTimeMatrix(grid_network(1, 6))
    zones = ZoneSystem(assign_nodes_to_zones(m.net, [0, 5], m), m)
    assert zones.members == {0: [0, 1, 2], 1: [3, 4, 5]}
    return m, zones


def two_zone_costs():
    return {A: {A: 0, B: 120}, B: {A: 120, B: 0}}


def tour(sample, start_zone=B, start=200.0, end=600.0, end_zone=B, obj=RHO, idx=0, sub=0, node=4):
    return SampledTour(sample, idx, sub, start_zone, start, obj, node, end_zone, end)


def problem(tours, idle, n_samples, **kw):
    base = dict(zones=[A, B], costs=two_zone_costs(), idle=idle, tours=tours, idle_increments={},
                n_samples=n_samples, t_max=2, period=300.0, now=0.0, gamma=0.5)
    base.update(kw)
    return RebalancingProblem(**base)


def oracle(p):
    return enumerate_rebalancing(p.zones, p.costs, p.idle, p.tours, p.idle_increments, p.n_samples,
                                 p.t_max, p.period, p.now, p.gamma, strict=p.strict_linkage)


# ---------------------------------------------------------------- ILP

def test_one_idle_vehicle_two_sample_tours():
    p = problem([tour(0), tour(1)], {A: 1, B: 0}, 2)
    sol = build_and_solve_rebalancing(p)
    assert sol.immediate == {(A, B): 1}
    assert sol.coverage == {0: (A, 0), 1: (A, 0)}
    assert sol.objective == pytest.approx(120 + RHO)
    assert sol.objective == pytest.approx(oracle(p))


def test_no_idle_vehicles():
    p = problem([tour(0), tour(1)], {A: 0, B: 0}, 2)
    assert build_and_solve_rebalancing(p).immediate == {}


def test_unreachable_tour_ignored():
    p = problem([tour(0, start=-50.0)], {A: 1, B: 1}, 1)
    sol = build_and_solve_rebalancing(p)
    assert p.admissible(p.tours[0]) == []
    assert sol.immediate == {} and sol.coverage == {} and sol.objective == 0


def test_linkage_modes():
    # a tour in only one of two samples
    loose = problem([tour(0)], {A: 1, B: 0}, 2)
    strict = problem([tour(0)], {A: 1, B: 0}, 2, strict_linkage=True)
    s1, s2 = build_and_solve_rebalancing(loose), build_and_solve_rebalancing(strict)
    assert s1.immediate == {(A, B): 1}
    assert s2.immediate == {}
    assert s1.objective == pytest.approx(oracle(loose))
    assert s2.objective == pytest.approx(oracle(strict))


def test_later_departure_is_discounted():
    # the tour starts at 700 s: it can be served by leaving now or at step 1 (300 s)
    p = problem([tour(0, start=700.0, end=1000.0)], {A: 1, B: 0}, 1)
    sol = build_and_solve_rebalancing(p)
    assert sol.coverage == {0: (A, 0)}  # undiscounted value beats the cheaper future trip
    assert sol.objective == pytest.approx(oracle(p))


def test_vehicle_returned_by_tour_can_serve_again():
    # one vehicle; tour 0 ends in A within step 0, tour 1 in B starts at 1000 s
    t0 = tour(0, start_zone=A, start=100, end=250, end_zone=A, idx=0, node=1)
    t1 = tour(0, start_zone=B, start=1000, end=1300, idx=1)
    p = problem([t0, t1], {A: 1, B: 0}, 1)
    sol = build_and_solve_rebalancing(p)
    assert set(sol.coverage) == {0, 1}
    assert sol.objective == pytest.approx(oracle(p))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("strict", [False, True])
def test_random_problems_match_enumeration(seed, strict):
    rng = random.Random(seed)
    zones = [0, 1, 2]
    costs = {o: {d: 0 if o == d else rng.choice([60, 120, 300]) for d in zones} for o in zones}
    n_s = rng.randint(1, 2)
    tours = []
    for s in range(n_s):
        for u in range(rng.randint(0, 2)):
            start = rng.choice([50, 150, 400, 700])
            tours.append(SampledTour(s, u, 0, rng.choice(zones), start, rng.choice([-1e3, -500, 50]),
                                     0, rng.choice(zones), start + rng.choice([100, 400])))
    p = RebalancingProblem(zones, costs, {z: rng.randint(0, 1) for z in zones}, tours,
                           {(s, 0, z): rng.randint(0, 1) for s in range(n_s) for z in zones},
                           n_s, 2, 300.0, 0.0, 0.5, strict)
    assert build_and_solve_rebalancing(p).objective == pytest.approx(oracle(p), abs=1e-6)


def test_failure_dumps_model(tmp_path):
    p = problem([tour(0)], {A: 1, B: 0}, 1)
    path = tmp_path / "dump.lp"
    build_and_solve_rebalancing(p, dump_path=path)
    assert path.read_text().startswith("\\ rebalancing")


def test_negative_idle_rejected():
    with pytest.raises(ValueError):
        problem([], {A: -1, B: 0}, 1)


# ---------------------------------------------------------------- future states

def test_zero_forecast_gives_no_tours(line):
    m, zones = line
    fs = simulate_future_states([], ForecastMatrix(300), 0, 900, [1, 2, 3], CONS, 1e6, zones, m, {}, 300)
    assert fs.tours == [] and fs.n_samples == 3


def test_single_unservable_request_opens_one_tour(line):
    m, zones = line
    fc = ForecastMatrix(300, {(0, 1, 0): 1.0})
    seed = next(s for s in range(1000)
                if len(sample_requests(fc, 0, 300, zones, m, np.random.default_rng(s),
                                       first_id=10 ** 9)) == 1)
    req = sample_requests(fc, 0, 300, zones, m, np.random.default_rng(seed), first_id=10 ** 9)[0]
    tours, inc = simulate_sample([], fc, 0, 300, CONS, 1e6, zones, m, {}, np.random.default_rng(seed), 0, 300)
    assert len(tours) == 1 and inc == {}
    t = tours[0]
    assert t.start_zone == zones.zone_of(req.origin) == 0 and t.first_pickup_node == req.origin
    assert t.end_zone == zones.zone_of(req.destination)
    # created at the start of its 60 s step at the zone centroid; it leaves the
    # centroid so as to arrive exactly at service start
    step_start = (req.request_time // 60) * 60
    lead = m.times[zones.centroid[0]][req.origin]
    assert t.start_time == pytest.approx(max(step_start, req.request_time - lead))


def test_samples_are_independent(line):
    m, zones = line
    fc = ForecastMatrix(300, {(a, b, t): 1.5 for a in (0, 1) for b in (0, 1) for t in (0, 300, 600)})
    veh = VehicleState(0, 2)
    veh.send_to(5)
    seeds = [11, 12, 13]
    fs = simulate_future_states([veh], fc, 0, 900, seeds, CONS, 1e6, zones, m, {}, 300)
    tours, inc = [], {}
    for s, seed in enumerate(seeds):
        t, i = simulate_sample([veh], fc, 0, 900, CONS, 1e6, zones, m, {}, np.random.default_rng(seed), s, 300)
        tours += t
        inc.update(i)
    assert fs.tours == tours and fs.idle_increments == inc
    # the single en-route vehicle becomes available exactly once per sample
    for s in range(3):
        assert sum(n for (ss, _, _), n in inc.items() if ss == s) == 1
    assert veh.rebalance_target == 5 and veh.node == 2  # caller's vehicle untouched


# ---------------------------------------------------------------- dispatch

def solution(immediate, coverage=None):
    return RebalancingSolution(immediate, {}, coverage or {}, 0.0, "optimal", 0.0)


def test_dispatch_nothing(line):
    m, zones = line
    assert dispatch_rebalancing(solution({}), {0: [VehicleState(0, 0)], 1: []}, [], zones, m, 0) == []


def test_dispatch_to_first_pickup(line):
    m, zones = line
    t = tour(0, start_zone=1, node=4)
    cmds = dispatch_rebalancing(solution({(0, 1): 1}, {0: (0, 0)}), {0: [VehicleState(0, 1)], 1: []},
                                [t], zones, m, 0)
    assert [(c.vehicle_id, c.target_node, c.target_zone) for c in cmds] == [(0, 4, 1)]


def test_dispatch_two_units_two_vehicles(line):
    m, zones = line
    idle = {0: [VehicleState(0, 0), VehicleState(1, 2)], 1: []}
    cmds = dispatch_rebalancing(solution({(0, 1): 2}), idle, [], zones, m, 0)
    assert sorted(c.vehicle_id for c in cmds) == [0, 1]
    assert all(c.target_node == zones.centroid[1] for c in cmds)


# ---------------------------------------------------------------- React

def test_react_no_locations(line):
    m, zones = line
    assert react_rebalance([], [VehicleState(0, 0)], m, zones) == ([], set())


def test_react_one_vehicle_two_locations(line):
    m, zones = line
    cmds, matched = react_rebalance([5, 2], [VehicleState(0, 0)], m, zones)
    assert [(c.vehicle_id, c.target_node) for c in cmds] == [(0, 2)] and matched == {1}


@pytest.mark.parametrize("nodes,locs", [((0, 5), (4, 1)), ((1, 2), (0, 5)), ((3, 3), (0, 5))])
def test_react_two_by_two(line, nodes, locs):
    m, zones = line
    vehs = [VehicleState(k, n) for k, n in enumerate(nodes)]
    cmds, _ = react_rebalance(list(locs), vehs, m, zones)
    sent = {c.vehicle_id: c.target_node for c in cmds}
    for v in vehs:
        sent.setdefault(v.vid, v.node)
    got = sum(m.times[v.node][sent[v.vid]] for v in vehs)
    best = min(sum(m.times[v.node][loc] for v, loc in zip(vehs, perm)) for perm in itertools.permutations(locs))
    assert got == best


def ctx(line, vehicles, now=0.0, forecast=None, rejected=(), seed=0):
    m, zones = line
    return RebalancingContext(now, vehicles, m, zones, CONS, 1e6, 300.0, {}, np.random.default_rng(seed),
                              forecast, list(rejected))


def test_react_memory(line):
    r = ReactRebalancer(memory_periods=1)
    busy = VehicleState(9, 0)
    busy.status = "en_route"
    assert r.rebalance(ctx(line, [busy], rejected=[5])) == []
    assert [n for n, _ in r.tracked] == [5]
    assert r.rebalance(ctx(line, [busy])) == []
    assert r.tracked == []  # dropped after one extra period
    r.rebalance(ctx(line, [busy], rejected=[4]))
    cmds = r.rebalance(ctx(line, [VehicleState(0, 0)]))
    assert [(c.vehicle_id, c.target_node) for c in cmds] == [(0, 4)] and r.tracked == []


# ---------------------------------------------------------------- QT

def test_qt_symmetric_no_commands(line):
    m, zones = line
    fc = ForecastMatrix(300, {(0, 1, 0): 3, (1, 0, 0): 3})
    idle = {0: [VehicleState(0, 0)], 1: [VehicleState(1, 5)]}
    assert qt_rebalance(fc, idle, zones, m, 0, horizon=300) == []
    flows = qt_flows({(0, 1): 3, (1, 0): 3}, {0: 1, 1: 1}, zones.cost, [0, 1])
    assert all(abs(v) < 1e-9 for v in flows.values())


@pytest.mark.parametrize("lam_ba,expected", [(0.4, 0), (0.6, 1)])
def test_qt_rounding(line, lam_ba, expected):
    m, zones = line
    fc = ForecastMatrix(300, {(1, 0, 0): lam_ba})
    idle = {0: [VehicleState(0, 0), VehicleState(2, 1)], 1: [VehicleState(1, 5), VehicleState(3, 4)]}
    flows = qt_flows({(1, 0): lam_ba}, {0: 2, 1: 2}, zones.cost, [0, 1], mu=1.0)
    assert flows[(0, 1)] == pytest.approx(lam_ba)
    cmds = qt_rebalance(fc, idle, zones, m, 0, mu=1.0, horizon=300, rng=np.random.default_rng(0))
    assert len(cmds) == expected
    assert all(c.target_zone == 1 and c.vehicle_id in (0, 2) for c in cmds)


def test_qt_idle_imbalance(line):
    m, zones = line
    idle = {0: [VehicleState(k, 0) for k in range(4)], 1: []}
    cmds = qt_rebalance(ForecastMatrix(300), idle, zones, m, 0, rng=np.random.default_rng(0))
    assert len(cmds) == 2 and {c.target_zone for c in cmds} == {1}


def test_qt_defaults():
    q = QTRebalancer()
    assert (q.mu, q.horizon) == (0.7, 2700)


# ---------------------------------------------------------------- Hor

def test_hor_no_idle():
    costs = {o: {d: 0 if o == d else 300 for d in (A, B)} for o in (A, B)}
    assert hor_flows({(A, B): 5}, {A: 0, B: 0}, costs, [A, B]) == {}


def test_hor_defaults():
    h = HorRebalancer()
    assert (h.mu, h.horizon, h.maximize, h.weight) == (0.1, 1800, True, "zone")
    with pytest.raises(ValueError):
        HorRebalancer(weight="bogus")


def test_hor_picks_better_destination():
    zs = [A, B, C]
    costs = {A: {A: 0, B: 300, C: 600}, B: {A: 300, B: 0, C: 300}, C: {A: 600, B: 300, C: 0}}
    lam = {(B, A): 20, (C, A): 15}
    H, mu = 1800.0, 0.1
    got = hor_flows(lam, {A: 1}, costs, zs, mu, H)
    assert got == {(A, B): 1}
    # enumerate the integer choices for the single vehicle
    lam_zone = {z: sum(lam.get((z, j), 0) for j in zs) for z in zs}
    best = None
    for d in [None] + zs:
        if d is not None and (1 - costs[A][d] / H) > lam_zone[d] * mu + 1e-9:
            continue
        val = 0 if d is None else (H - costs[A][d]) * lam_zone[d]
        if best is None or val > best[0]:
            best = (val, d)
    assert best[1] == B


def test_hor_excludes_pairs_beyond_horizon():
    costs = {A: {A: 0, B: 2000}, B: {A: 2000, B: 0}}
    assert hor_flows({(B, A): 100}, {A: 1}, costs, [A, B], 0.1, 1800) == {}


def test_hor_od_weight_and_commands(line):
    m, zones = line
    # demand originates only in zone 1, so staying in zone 0 earns nothing
    fc = ForecastMatrix(300, {(1, 0, 0): 30.0})
    idle = {0: [VehicleState(0, 0)], 1: []}
    cmds = hor_rebalance(fc, idle, zones, m, 0, mu=0.1, horizon=1800)
    assert [(c.vehicle_id, c.target_node) for c in cmds] == [(0, zones.centroid[1])]
    # symmetric demand: zone weighting keeps the vehicle, pair weighting moves it
    lam = {(0, 1): 30.0, (1, 0): 30.0}
    assert hor_flows(lam, {0: 1}, zones.cost, [0, 1], weight="zone") == {(0, 0): 1}
    assert hor_flows(lam, {0: 1}, zones.cost, [0, 1], weight="od") == {(0, 1): 1}


# ---------------------------------------------------------------- strategy objects

def test_make_rebalancer():
    assert set(STRATEGIES) == {"none", "react", "qt", "hor", "sampling"}
    for name in STRATEGIES:
        assert make_rebalancer(name).name == name
    with pytest.raises(ValueError):
        make_rebalancer("teleport")


def test_sampling_rebalancer_sends_vehicle_towards_demand(line):
    fc = ForecastMatrix(300, {(1, 1, t): 4.0 for t in (0, 300, 600)})
    r = SamplingRebalancer(horizon=900, n_samples=3)
    cmds = r.rebalance(ctx(line, [VehicleState(0, 0)], forecast=fc, seed=3))
    assert len(r.call_times) == 1
    assert [c.target_zone for c in cmds] == [1]


def test_sampling_rebalancer_without_idle_vehicles(line):
    busy = VehicleState(0, 0)
    busy.send_to(5)
    r = SamplingRebalancer(horizon=900)
    assert r.rebalance(ctx(line, [busy], forecast=ForecastMatrix(300, {(1, 1, 0): 5.0}))) == []
