"""Time-stepped fleet simulation: request arrival, batch assignment, repositioning, vehicle motion."""
from __future__ import annotations

import dataclasses
import functools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assignment import BatchProblem, build_v2rbs, solve_assignment
from .demand import (
    ForecastMatrix, Request, asymmetric_grid_demand, load_forecast, load_requests, myopic_forecast,
    perfect_forecast, uniform_demand,
)
from .network import (
    Network, TravelTimeMatrix, ZoneSystem, build_zones, grid_network, load_network, load_zones,
)
from .rebalancing import RebalancingContext, make_rebalancer
from .scheduling import (
    EN_ROUTE, IDLE, REBALANCING, TIME_EPS, Event, ServiceConstraints, VehicleState, advance_schedule,
)

LOG = logging.getLogger(__name__)

EVENT_COLUMNS = ("time_s", "event_type", "vehicle_id", "request_id", "node", "occupancy")


class ConfigError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


@dataclass
class Scenario:
    # world
    network: str = "grid:6x6"
    edge_time: float = 60.0
    edge_length: float = 500.0
    zones: str = "auto"
    zone_reach_limit: float = 120.0
    # demand
    requests: str = "synthetic"
    demand: str = "asymmetric"
    demand_rate_per_hour: float = 90.0
    directed_share: float = 0.9
    # fleet and service
    fleet_size: int = 12
    placement: str = "uniform"
    t_max_wait: float = 360.0
    max_rel_detour: float = 0.4
    capacity: int = 4
    boarding_duration: float = 0.0
    pi: float = 1e6
    # timing
    duration: float = 7200.0
    batch_interval: float = 60.0
    rebalancing_period: float = 900.0
    rejection: str = "deadline"
    assignment_time_limit: float = 30.0
    max_grade: int = 0
    # repositioning
    rebalancer: str = "none"
    forecast: str = "perfect"
    forecast_file: str = ""
    forecast_bin: float = 0.0
    horizon: float = 2700.0
    n_samples: int = 3
    gamma: float = 0.5
    strict_linkage: bool = False
    rebalancing_time_limit: float = 30.0
    mu_qt: float = 0.7
    horizon_qt: float = 2700.0
    mu_hor: float = 0.1
    horizon_hor: float = 1800.0
    hor_sense: str = "max"
    hor_weight: str = "zone"
    react_memory: int = 1
    dump_dir: str = ""
    seed: int = 0

    # ------------------------------------------------------------ config text

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def with_values(self, values: dict) -> "Scenario":
        """Copy with ``values`` applied; string values are converted to the field type."""
        defaults = {f.name: f.default for f in dataclasses.fields(self)}
        out = {}
        for key, raw in values.items():
            if key not in defaults:
                raise ConfigError(f"unknown scenario key {key!r}")
            kind = type(defaults[key])
            try:
                if not isinstance(raw, str):
                    val = kind(raw)
                elif kind is bool:
                    low = raw.strip().lower()
                    if low not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    val = low in ("true", "1", "yes")
                elif kind is int:
                    val = int(float(raw)) if float(raw).is_integer() else int(raw)
                else:
                    val = kind(raw.strip())
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
            out[key] = val
        return dataclasses.replace(self, **out)

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "Scenario":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        values.update(overrides or {})
        sc = cls().with_values(values)
        sc.validate()
        return sc

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "Scenario":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), overrides)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.fleet_size >= 1, "fleet_size must be at least 1")
        need(self.batch_interval > 0, "batch_interval must be positive")
        need(self.duration > 0, "duration must be positive")
        need(_is_multiple(self.rebalancing_period, self.batch_interval),
             "rebalancing_period must be a multiple of batch_interval")
        need(_is_multiple(self.horizon, self.rebalancing_period),
             "horizon must be a multiple of rebalancing_period")
        need(self.rebalancer in ("none", "react", "qt", "hor", "sampling"),
             f"unknown rebalancer {self.rebalancer!r}")
        need(self.forecast in ("perfect", "myopic", "file"), f"unknown forecast {self.forecast!r}")
        need(self.forecast != "file" or bool(self.forecast_file), "forecast = file needs forecast_file")
        need(self.placement in ("uniform", "forecast"), f"unknown placement {self.placement!r}")
        need(self.rejection in ("deadline", "first_batch"), f"unknown rejection {self.rejection!r}")
        need(self.demand in ("asymmetric", "uniform"), f"unknown demand {self.demand!r}")
        need(self.hor_sense in ("max", "min"), "hor_sense must be max or min")
        need(self.hor_weight in ("zone", "od"), "hor_weight must be zone or od")
        need(self.n_samples >= 1, "n_samples must be at least 1")
        need(0 <= self.gamma <= 1, "gamma must lie in [0, 1]")
        need(self.mu_qt >= 0 and self.mu_hor >= 0, "demand scaling factors must be nonnegative")
        need(self.horizon_hor > 0 and self.horizon_qt > 0, "strategy horizons must be positive")
        need(0 <= self.directed_share <= 1, "directed_share must lie in [0, 1]")
        need(self.demand_rate_per_hour >= 0, "demand_rate_per_hour must be nonnegative")
        self.constraints()  # raises on negative values

    def constraints(self) -> ServiceConstraints:
        try:
            return ServiceConstraints(self.t_max_wait, self.max_rel_detour, self.capacity,
                                      self.boarding_duration)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def bin_s(self) -> float:
        return self.forecast_bin or self.rebalancing_period


def _is_multiple(a: float, b: float) -> bool:
    q = a / b
    return q >= 1 - 1e-9 and abs(q - round(q)) < 1e-9


# ---------------------------------------------------------------- world construction

@dataclass
class World:
    net: Network
    matrix: TravelTimeMatrix
    zones: ZoneSystem


@functools.lru_cache(maxsize=8)
def _cached_world(network: str, edge_time: float, edge_length: float, zones: str,
                  reach_limit: float) -> World:
    if network.startswith("grid:"):
        rows, cols = (int(x) for x in network[5:].lower().split("x"))
        net = grid_network(rows, cols, edge_time, edge_length)
    else:
        net = load_network(network)
    matrix = TravelTimeMatrix(net)
    zone_list = build_zones(net, reach_limit, matrix) if zones == "auto" else load_zones(zones)
    return World(net, matrix, ZoneSystem(zone_list, matrix))


def build_world(sc: Scenario) -> World:
    return _cached_world(sc.network, sc.edge_time, sc.edge_length, sc.zones, sc.zone_reach_limit)


def _seed_streams(seed: int):
    demand, placement, strategy = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(demand), np.random.default_rng(placement),
            np.random.default_rng(strategy))


def build_requests(sc: Scenario, world: World, rng: np.random.Generator) -> list[Request]:
    if sc.requests != "synthetic":
        reqs = load_requests(sc.requests, world.matrix)
    elif sc.demand == "asymmetric":
        if not sc.network.startswith("grid:"):
            raise ConfigError("asymmetric synthetic demand needs a grid network")
        rows, cols = (int(x) for x in sc.network[5:].lower().split("x"))
        reqs = asymmetric_grid_demand(rows, cols, sc.demand_rate_per_hour, sc.duration, world.matrix,
                                      rng, sc.directed_share)
    else:
        reqs = uniform_demand(sorted(world.net.access_nodes), sc.demand_rate_per_hour, sc.duration,
                              world.matrix, rng)
    return sorted(reqs, key=lambda r: (r.request_time, r.id))


def place_initial_fleet(sc: Scenario, world: World, rng: np.random.Generator,
                        forecast: ForecastMatrix | None = None) -> list[VehicleState]:
    """Uniform over access nodes, or proportional to first-hour forecast origins."""
    access = sorted(world.net.access_nodes)
    if sc.placement == "forecast" and forecast is not None and forecast.total() > 0:
        weight: dict[int, float] = {}
        for (i, _), lam in forecast.od_totals(0.0, 3600.0).items():
            weight[i] = weight.get(i, 0.0) + lam
        zones = sorted(z for z in weight if weight[z] > 0)
        if zones:
            p = np.array([weight[z] for z in zones])
            p /= p.sum()
            out = []
            for vid in range(sc.fleet_size):
                z = zones[int(rng.choice(len(zones), p=p))]
                members = world.zones.members[z]
                out.append(VehicleState(vid, int(members[rng.integers(len(members))])))
            return out
    return [VehicleState(vid, int(access[rng.integers(len(access))])) for vid in range(sc.fleet_size)]


# ---------------------------------------------------------------- online counters

class _Meter:
    """Per-vehicle running totals fed with that vehicle's events in log order."""

    __slots__ = ("node", "occ", "rebalancing", "occ_since", "revenue_s", "km", "empty_km", "rebal_km")

    def __init__(self, node):
        self.node = node
        self.occ = 0
        self.rebalancing = False
        self.occ_since = 0.0
        self.revenue_s = 0.0
        self.km = 0.0
        self.empty_km = 0.0
        self.rebal_km = 0.0

    def feed(self, ev: Event, net: Network):
        kind = ev.kind
        if kind == "node":
            d = net.edge(self.node, ev.node).length / 1000.0
            self.km += d
            if self.occ == 0:
                self.empty_km += d
                if self.rebalancing:
                    self.rebal_km += d
            self.node = ev.node
        elif kind in ("board", "alight"):
            if self.occ == 0 and ev.occupancy > 0:
                self.occ_since = ev.time
            elif self.occ > 0 and ev.occupancy == 0:
                self.revenue_s += ev.time - self.occ_since
            self.occ = ev.occupancy
        elif kind == "rebalance":
            self.rebalancing = True
        elif kind in ("assign", "idle"):
            self.rebalancing = False


@dataclass
class SimulationResult:
    scenario: Scenario
    world: World
    events: list[Event]
    requests: dict[int, Request]
    served: set
    rejected: set
    open_requests: set
    fleet_states: list[tuple[float, int, int, int]]
    online: dict
    rebalancing_call_times: list[float]
    rebalancing_call_clock: list[float]
    end_time: float
    vehicles: list[VehicleState]
    wall_time: float = 0.0


# ---------------------------------------------------------------- rejection

def hopeless(req: Request, vehicles: list[VehicleState], now: float, cons: ServiceConstraints,
             matrix: TravelTimeMatrix) -> bool:
    """True when no vehicle can reach the origin before the pick-up deadline."""
    deadline = req.request_time + cons.t_max_wait + TIME_EPS
    for v in vehicles:
        node, t0 = v.anchor(now)
        if t0 + matrix.times[node][req.origin] <= deadline:
            return False
    return True


def expire_requests(pending: list[int], requests: dict[int, Request], vehicles: list[VehicleState],
                    now: float, cons: ServiceConstraints, matrix: TravelTimeMatrix) -> list[int]:
    """Pending requests that no vehicle can reach in time any more (they are rejected)."""
    return [rid for rid in pending if hopeless(requests[rid], vehicles, now, cons, matrix)]


# ---------------------------------------------------------------- main loop

def _make_strategy(sc: Scenario):
    params = {}
    if sc.rebalancer == "react":
        params = dict(memory_periods=sc.react_memory)
    elif sc.rebalancer == "qt":
        params = dict(mu=sc.mu_qt, horizon=sc.horizon_qt)
    elif sc.rebalancer == "hor":
        params = dict(mu=sc.mu_hor, horizon=sc.horizon_hor, maximize=sc.hor_sense == "max",
                      weight=sc.hor_weight)
    elif sc.rebalancer == "sampling":
        params = dict(horizon=sc.horizon, n_samples=sc.n_samples, gamma=sc.gamma,
                      strict_linkage=sc.strict_linkage, time_limit=sc.rebalancing_time_limit,
                      dump_dir=sc.dump_dir or None)
    return make_rebalancer(sc.rebalancer, **params)


def _check_state(vehicles, assigned, cons, clock, dump_dir=None):
    problems = []
    seen: dict[int, int] = {}
    for v in vehicles:
        if v.occupancy > cons.capacity:
            problems.append(f"vehicle {v.vid} carries {v.occupancy} > {cons.capacity}")
        for s in v.stops:
            for rid in s.boarding:
                if rid in seen:
                    problems.append(f"request {rid} in schedules of {seen[rid]} and {v.vid}")
                seen[rid] = v.vid
    for rid, vid in assigned.items():
        if seen.get(rid) != vid:
            problems.append(f"assigned request {rid} missing from vehicle {vid}")
    if problems:
        dump = {"clock": clock, "problems": problems,
                "vehicles": [{"vid": v.vid, "node": v.node, "next": v.next_node, "onboard": sorted(v.onboard),
                              "stops": [[s.node, sorted(s.boarding), sorted(s.alighting)] for s in v.stops]}
                             for v in vehicles]}
        if dump_dir:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            (Path(dump_dir) / "state_dump.json").write_text(json.dumps(dump, indent=1))
        raise SimulationError(f"inconsistent state at t={clock}: {problems[:3]}")


def run(sc: Scenario, world: World | None = None, requests: list[Request] | None = None,
        forecast: ForecastMatrix | None = None,
        fleet: list[VehicleState] | None = None) -> SimulationResult:
    """Simulate one scenario; deterministic for a given ``sc.seed``.

    ``world``, ``requests``, ``forecast`` and ``fleet`` replace the parts the
    scenario would otherwise build itself.
    """
    wall = time.perf_counter()
    sc.validate()
    world = world or build_world(sc)
    net, matrix, zones = world.net, world.matrix, world.zones
    cons = sc.constraints()
    rng_demand, rng_place, rng_strategy = _seed_streams(sc.seed)
    all_reqs = requests if requests is not None else build_requests(sc, world, rng_demand)
    all_reqs = sorted(all_reqs, key=lambda r: (r.request_time, r.id))
    if forecast is None:
        if sc.forecast == "perfect":
            forecast = perfect_forecast(all_reqs, zones, sc.bin_s)
        elif sc.forecast == "file":
            forecast = load_forecast(sc.forecast_file, sc.bin_s)
    if forecast is not None:
        forecast.validate(zones)
    if fleet is not None:
        if len(fleet) != sc.fleet_size:
            raise ConfigError("fleet does not match fleet_size")
        vehicles = [v.copy() for v in fleet]
    else:
        vehicles = place_initial_fleet(sc, world, rng_place, forecast)
    strategy = _make_strategy(sc)
    myopic_span = max(sc.horizon, sc.horizon_qt, sc.horizon_hor)

    events: list[Event] = []
    meters = {v.vid: _Meter(v.node) for v in vehicles}

    def emit(batch: list[Event]):
        batch.sort(key=lambda e: e.time)
        for ev in batch:
            if ev.vid >= 0:
                meters[ev.vid].feed(ev, net)
        events.extend(batch)

    emit([Event(0.0, "place", v.vid, -1, v.node, 0) for v in vehicles])

    known: dict[int, Request] = {}
    pending: list[int] = []          # admitted, unassigned
    seen_batch: set[int] = set()     # pending requests that went through an assignment batch
    assigned: dict[int, int] = {}    # assigned, not yet boarded
    served, rejected = set(), set()
    rejected_nodes: list[int] = []
    fleet_states = []
    call_clock = []
    dt = sc.batch_interval
    period_steps = int(round(sc.rebalancing_period / dt))
    k = 0  # next request to log
    a = 0  # next request to admit
    n_steps = int(math.ceil(sc.duration / dt - 1e-9))

    def log_requests_until(t_end, batch):
        nonlocal k
        while k < len(all_reqs) and all_reqs[k].request_time <= t_end + 1e-9:
            r = all_reqs[k]
            known[r.id] = r
            batch.append(Event(r.request_time, "request", -1, r.id, r.origin, 0))
            k += 1

    def advance(clock, batch):
        for v in vehicles:
            for ev in advance_schedule(v, clock, dt, matrix, known, cons):
                batch.append(ev)
                if ev.kind == "board":
                    assigned.pop(ev.rid, None)
                elif ev.kind == "alight":
                    served.add(ev.rid)

    first = []
    log_requests_until(0.0, first)
    emit(first)
    for step in range(n_steps):
        clock = step * dt
        batch: list[Event] = []
        # (1) admit
        while a < len(all_reqs) and all_reqs[a].request_time <= clock + 1e-9:
            pending.append(all_reqs[a].id)
            a += 1
        # (2) expire: only requests that already went through a batch
        if sc.rejection == "deadline":
            old = [rid for rid in pending if rid in seen_batch]
            for rid in expire_requests(old, known, vehicles, clock, cons, matrix):
                pending.remove(rid)
                rejected.add(rid)
                rejected_nodes.append(known[rid].origin)
                batch.append(Event(clock, "reject", -1, rid, known[rid].origin, 0))
        # (3) assignment batch
        if pending:
            obligations = dict(assigned)
            for v in vehicles:
                for rid in v.onboard:
                    obligations[rid] = v.vid
            problem = BatchProblem(vehicles, [known[r] for r in pending], known, obligations)
            v2rbs = build_v2rbs(problem, matrix, cons, sc.pi, clock, max_grade=sc.max_grade or None)
            result = solve_assignment(problem, v2rbs, sc.assignment_time_limit)
            by_vid = {v.vid: v for v in vehicles}
            for vid in sorted(result.chosen):
                b = result.chosen[vid]
                v = by_vid[vid]
                v.set_stops(b.best_schedule.stops)
                for rid in sorted(b.request_set):
                    assigned[rid] = vid
                    pending.remove(rid)
                    batch.append(Event(clock, "assign", vid, rid, v.node, v.occupancy))
            seen_batch.update(pending)
            if sc.rejection == "first_batch":
                for rid in list(pending):
                    pending.remove(rid)
                    rejected.add(rid)
                    rejected_nodes.append(known[rid].origin)
                    batch.append(Event(clock, "reject", -1, rid, known[rid].origin, 0))
        _check_state(vehicles, assigned, cons, clock, sc.dump_dir or None)
        # (4) repositioning
        if step % period_steps == 0 and sc.rebalancer != "none":
            fc = forecast
            if sc.forecast == "myopic":
                fc = myopic_forecast(list(known.values()), clock, sc.bin_s, myopic_span, zones)
            ctx = RebalancingContext(clock, vehicles, matrix, zones, cons, sc.pi, sc.rebalancing_period,
                                     known, rng_strategy, fc, list(rejected_nodes))
            rejected_nodes.clear()
            by_vid = {v.vid: v for v in vehicles}
            for cmd in strategy.rebalance(ctx):
                v = by_vid[cmd.vehicle_id]
                if not v.is_idle:
                    raise SimulationError(f"repositioning command for busy vehicle {v.vid}")
                v.send_to(cmd.target_node)
                batch.append(Event(clock, "rebalance", v.vid, -1, cmd.target_node, v.occupancy))
            call_clock.append(clock)
        # (5) motion
        advance(clock, batch)
        log_requests_until(clock + dt, batch)
        emit(batch)
        fleet_states.append(_fleet_state(clock + dt, vehicles))

    # flush: no new assignments, repositioning stopped after the current edge
    clock = n_steps * dt
    for v in vehicles:
        if v.rebalance_target is not None and not v.stops:
            if v.next_node is not None:
                v.rebalance_target = v.next_node
                v.path = [v.next_node]
            else:
                v.rebalance_target = None
    guard = 0
    while any(v.stops or v.next_node is not None or v.rebalance_target is not None or v.status != IDLE
              for v in vehicles):
        batch = []
        advance(clock, batch)
        emit(batch)
        clock += dt
        fleet_states.append(_fleet_state(clock, vehicles))
        guard += 1
        if guard > 100000:
            raise SimulationError("flush phase does not terminate")
    _check_state(vehicles, assigned, cons, clock, sc.dump_dir or None)

    # pending at the horizon or requested after the last batch
    open_requests = set(known) - served - rejected
    online = {
        "served": len(served),
        "rejected": len(rejected),
        "revenue_s": sum(meters[vid].revenue_s for vid in sorted(meters)),
        "vkm": sum(meters[vid].km for vid in sorted(meters)),
        "empty_vkm": sum(meters[vid].empty_km for vid in sorted(meters)),
        "rebalancing_vkm": sum(meters[vid].rebal_km for vid in sorted(meters)),
    }
    return SimulationResult(sc, world, events, known, served, rejected, open_requests, fleet_states,
                            online, list(strategy.call_times), call_clock, clock, vehicles,
                            time.perf_counter() - wall)


def _fleet_state(t, vehicles):
    idle = sum(v.status == IDLE for v in vehicles)
    busy = sum(v.status == EN_ROUTE for v in vehicles)
    rebal = sum(v.status == REBALANCING for v in vehicles)
    return (t, idle, busy, rebal)
