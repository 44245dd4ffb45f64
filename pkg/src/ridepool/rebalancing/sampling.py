"""Sampling-based predictive repositioning for ride-pooling fleets.

Future requests are drawn from the demand forecast and inserted into the
schedules of the en-route fleet.  Requests no vehicle can take open a schedule
for a hypothetical vehicle; each such schedule (and each of its suffixes that
starts after the vehicle ran empty) is a tour that an idle vehicle could serve.
A zone-level ILP then sends idle vehicles towards the tours, trading driving
cost against the discounted tour value over all samples.
"""
from __future__ import annotations

import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .. import milp
from ..demand import ForecastMatrix, Request, sample_requests
from ..network import TravelTimeMatrix, ZoneSystem
from ..scheduling import (
    ServiceConstraints, Stop, VehicleState, advance_schedule, insert_request, make_schedule,
    split_idle_subschedules,
)
from .base import RebalanceCommand, Rebalancer, RebalancingContext, closest_vehicle

LOG = logging.getLogger(__name__)

SAMPLE_STEP = 60.0
# sampled request ids live far above real ones
SAMPLED_ID_BASE = 10 ** 9


@dataclass(frozen=True)
class SampledTour:
    sample: int
    tour: int
    sub_tour: int
    start_zone: int
    start_time: float
    objective: float
    first_pickup_node: int
    end_zone: int
    end_time: float


@dataclass
class FutureStates:
    tours: list[SampledTour]
    # (sample, interval index, zone) -> vehicles that become idle there
    idle_increments: dict[tuple[int, int, int], int]
    n_samples: int


def _tours_from_schedule(stops: list[Stop], sample: int, tour: int, zones: ZoneSystem,
                         matrix: TravelTimeMatrix, cons: ServiceConstraints, pi: float,
                         latest_start: float) -> list[SampledTour]:
    segments = split_idle_subschedules(stops)
    end_stop = stops[-1]
    end_zone = zones.zone_of(end_stop.node)
    out = []
    for k in range(len(segments)):
        suffix = [s for seg in segments[k:] for s in seg]
        first = suffix[0]
        zone = zones.zone_of(first.node)
        service_start = first.planned_departure - (cons.boarding_duration if (first.boarding or first.alighting) else 0.0)
        start = service_start - matrix.times[zones.centroid[zone]][first.node]
        if start > latest_start:
            break
        served = set()
        for s in suffix:
            served.update(s.boarding)
        rho = (end_stop.planned_departure - start) - pi * len(served)
        out.append(SampledTour(sample, tour, len(out), zone, start, rho, first.node,
                               end_zone, end_stop.planned_departure))
    return out


def simulate_sample(en_route: list[VehicleState], fc: ForecastMatrix, now: float, horizon: float,
                    cons: ServiceConstraints, pi: float, zones: ZoneSystem, matrix: TravelTimeMatrix,
                    requests: Mapping[int, Request], rng: np.random.Generator, sample: int,
                    period: float, step: float = SAMPLE_STEP, allow_hypothetical: bool = True):
    """One forecast sample: returns its tours and the zone/interval where en-route vehicles go idle."""
    fleet = [v.copy() for v in sorted(en_route, key=lambda v: v.vid)]
    sampled = sample_requests(fc, now, horizon, zones, matrix, rng,
                              first_id=SAMPLED_ID_BASE * (sample + 1))
    reqs = dict(requests)
    for r in sampled:
        reqs[r.id] = r
    hypothetical: list[VehicleState] = []
    history: dict[int, list[Stop]] = {}
    idle_at: dict[int, tuple[float, int]] = {}
    for v in fleet:
        if v.is_idle:
            idle_at[v.vid] = (now, v.node)
    k = 0
    t = now
    end = now + horizon
    while t < end - 1e-9:
        while k < len(sampled) and sampled[k].request_time < t + step:
            r = sampled[k]
            k += 1
            best = None
            for v in fleet + hypothetical:
                sch = v.schedule(t)
                node, t0 = v.anchor(t)
                old_end = sch.end_time if sch.stops else t0
                new = insert_request(sch, v, r, cons, pi, t, matrix, reqs)
                if new is None:
                    continue
                delta = new.end_time - old_end
                if best is None or delta < best[0] - 1e-9:
                    best = (delta, v, new)
            if best is not None:
                _, v, new = best
                v.set_stops(new.stops)
                idle_at.pop(v.vid, None)
            elif allow_hypothetical:
                zone = zones.zone_of(r.origin)
                hv = VehicleState(-(len(hypothetical) + 1), zones.centroid[zone])
                sch = insert_request(hv.schedule(t), hv, r, cons, pi, t, matrix, reqs)
                if sch is None:
                    hv = VehicleState(hv.vid, r.origin)
                    sch = make_schedule([Stop(r.origin, frozenset((r.id,))), Stop(r.destination, alighting=frozenset((r.id,)))],
                                        r.origin, t, t, (), reqs, cons, matrix.times)
                hv.set_stops(sch.stops)
                hypothetical.append(hv)
                history[hv.vid] = []
        dt = min(step, end - t)
        for v in fleet + hypothetical:
            before = list(v.stops)
            events = advance_schedule(v, t, dt, matrix, reqs, cons)
            if v.vid in history:
                history[v.vid].extend(before[:len(before) - len(v.stops)])
            for ev in events:
                if ev.kind == "idle" and v.vid >= 0:
                    idle_at[v.vid] = (ev.time, ev.node)
        t += dt

    increments: dict[tuple[int, int, int], int] = defaultdict(int)
    for v in fleet:
        if v.stops:
            last = v.stops[-1]
            when, node = last.planned_departure, last.node
        elif v.rebalance_target is not None:
            node = v.rebalance_target
            nxt, t0 = v.anchor(t)
            when = t0 + matrix.times[nxt][node]
        elif v.vid in idle_at:
            when, node = idle_at[v.vid]
        else:
            continue
        interval = int(math.floor((when - now) / period + 1e-9))
        increments[(sample, max(interval, 0), zones.zone_of(node))] += 1

    tours: list[SampledTour] = []
    for u, hv in enumerate(hypothetical):
        stops = history[hv.vid] + list(hv.stops)
        tours.extend(_tours_from_schedule(stops, sample, u, zones, matrix, cons, pi, now + horizon))
    return tours, dict(increments)


def simulate_future_states(en_route: list[VehicleState], fc: ForecastMatrix, now: float,
                           horizon: float, seeds: list[int], cons: ServiceConstraints, pi: float,
                           zones: ZoneSystem, matrix: TravelTimeMatrix,
                           requests: Mapping[int, Request], period: float,
                           step: float = SAMPLE_STEP, allow_hypothetical: bool = True) -> FutureStates:
    """Run one future-state sample per seed; sample ``s`` uses ``default_rng(seeds[s])``."""
    if any(v.is_idle and not v.stops and v.rebalance_target is None for v in en_route):
        LOG.debug("idle vehicles passed to the future-state simulation are treated as en-route")
    tours: list[SampledTour] = []
    increments: dict[tuple[int, int, int], int] = {}
    for s, seed in enumerate(seeds):
        t, inc = simulate_sample(en_route, fc, now, horizon, cons, pi, zones, matrix, requests,
                                 np.random.default_rng(seed), s, period, step, allow_hypothetical)
        tours.extend(t)
        increments.update(inc)
    return FutureStates(tours, increments, len(seeds))


# ---------------------------------------------------------------- rebalancing ILP

@dataclass
class RebalancingProblem:
    zones: list[int]
    costs: dict[int, dict[int, float]]
    idle: dict[int, int]
    tours: list[SampledTour]
    idle_increments: dict[tuple[int, int, int], int]
    n_samples: int
    t_max: int
    period: float
    now: float
    gamma: float = 0.5
    strict_linkage: bool = False

    def __post_init__(self):
        if any(v < 0 for v in self.idle.values()) or any(v < 0 for v in self.idle_increments.values()):
            raise ValueError("idle counts must be nonnegative")

    def admissible(self, tour: SampledTour) -> list[tuple[int, int]]:
        """Departure (zone, step) pairs that reach the tour's start zone in time."""
        out = []
        for T in range(self.t_max + 1):
            dep = self.now + T * self.period
            for o in self.zones:
                if dep + self.costs[o][tour.start_zone] <= tour.start_time + 1e-6:
                    out.append((o, T))
        return out

    def end_interval(self, tour: SampledTour) -> int:
        return int(math.floor((tour.end_time - self.now) / self.period + 1e-9))

    def groups(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = defaultdict(list)
        for k, t in enumerate(self.tours):
            out[(t.sample, t.tour)].append(k)
        return dict(out)


@dataclass
class RebalancingSolution:
    immediate: dict[tuple[int, int], int]
    future: dict[tuple[int, int, int, int], int]
    coverage: dict[int, tuple[int, int]]  # tour index -> (departure zone, step)
    objective: float
    status: str
    runtime: float
    model: milp.LinearModel | None = None


def build_rebalancing_model(p: RebalancingProblem):
    model = milp.LinearModel("rebalancing", "min")
    Z = p.zones
    S = range(p.n_samples)
    w = 1.0 / max(p.n_samples, 1)
    phi: dict[tuple[int, int, int], int] = {}
    link0: dict[tuple[int, int, int], list[int]] = defaultdict(list)   # (s, o, d)
    linkT: dict[tuple[int, int, int, int], list[int]] = defaultdict(list)  # (s, T, o, d)
    obj: dict[int, float] = {}
    for k, tour in enumerate(p.tours):
        for o, T in p.admissible(tour):
            j = model.add_var(f"phi_{tour.sample}_{tour.tour}_{tour.sub_tour}_{o}_{T}", kind=milp.BINARY)
            phi[(k, o, T)] = j
            obj[j] = w * (p.gamma ** T) * tour.objective
            if T == 0:
                link0[(tour.sample, o, tour.start_zone)].append(j)
            else:
                linkT[(tour.sample, T, o, tour.start_zone)].append(j)
    theta0: dict[tuple[int, int], int] = {}
    for (s, o, d) in sorted(link0):
        if (o, d) not in theta0:
            j = model.add_var(f"theta0_{o}_{d}", 0, p.idle.get(o, 0), milp.INTEGER)
            theta0[(o, d)] = j
            obj[j] = p.costs[o][d]
    thetaT: dict[tuple[int, int, int, int], int] = {}
    for key in sorted(linkT):
        s, T, o, d = key
        j = model.add_var(f"theta_{s}_{T}_{o}_{d}", 0, math.inf, milp.INTEGER)
        thetaT[key] = j
        obj[j] = w * (p.gamma ** T) * p.costs[o][d]
    model.set_objective(obj)

    rel = milp.EQ if p.strict_linkage else milp.GE
    for o in Z:
        row = {theta0[(o, d)]: 1.0 for d in Z if (o, d) in theta0}
        if row:
            model.add_constr(row, milp.LE, p.idle.get(o, 0), f"supply0_{o}")
    for s in S:
        for (o, d), j in sorted(theta0.items()):
            row = {j: 1.0}
            for v in link0.get((s, o, d), []):
                row[v] = -1.0
            model.add_constr(row, rel, 0.0, f"link0_{s}_{o}_{d}")
    for key, j in sorted(thetaT.items()):
        row = {j: 1.0}
        for v in linkT[key]:
            row[v] = -1.0
        model.add_constr(row, rel, 0.0, "linkT_%d_%d_%d_%d" % key)

    phi_of: dict[int, list[int]] = defaultdict(list)
    for (k, o, T), j in phi.items():
        phi_of[k].append(j)
    ends: dict[tuple[int, int], list[tuple[int, int]]] = defaultdict(list)  # (s, zone) -> (interval, tour)
    for k, tour in enumerate(p.tours):
        if phi_of.get(k):
            ends[(tour.sample, tour.end_zone)].append((p.end_interval(tour), k))
    for s in S:
        for T in range(1, p.t_max + 1):
            for o in Z:
                row: dict[int, float] = {}
                for d in Z:
                    j0 = theta0.get((o, d))
                    if j0 is not None:
                        row[j0] = 1.0
                    for tau in range(1, T + 1):
                        j = thetaT.get((s, tau, o, d))
                        if j is not None:
                            row[j] = 1.0
                if not row:
                    continue
                # covered tours that finish in o before step T hand a vehicle back
                for interval, k in ends.get((s, o), []):
                    if interval <= T - 1:
                        for j in phi_of[k]:
                            row[j] = row.get(j, 0.0) - 1.0
                rhs = p.idle.get(o, 0) + sum(p.idle_increments.get((s, tau, o), 0) for tau in range(T))
                model.add_constr(row, milp.LE, rhs, f"supply_{s}_{T}_{o}")
    for (s, u), members in sorted(p.groups().items()):
        row = {j: 1.0 for k in members for j in phi_of.get(k, [])}
        if len(row) > 1:
            model.add_constr(row, milp.LE, 1.0, f"once_{s}_{u}")
    return model, theta0, thetaT, phi


def build_and_solve_rebalancing(p: RebalancingProblem, time_limit: float = 30.0,
                                dump_path=None) -> RebalancingSolution:
    """Solve the repositioning ILP; only the immediate trips are meant for execution.

    The model is written in LP format to ``dump_path`` when given, and always on
    solver failure (to ``rebalancing_failure.lp`` when no path is given).
    """
    start = time.perf_counter()
    model, theta0, thetaT, phi = build_rebalancing_model(p)
    if dump_path is not None:
        milp.dump_model(model, dump_path)
    sol = milp.solve(model, time_limit=time_limit)
    if not sol.ok:
        path = dump_path or "rebalancing_failure.lp"
        milp.dump_model(model, path)
        raise RuntimeError(f"rebalancing ILP failed with status {sol.status}; model written to {path}")
    immediate = {k: int(round(sol.x[j])) for k, j in theta0.items() if sol.x[j] > 0.5}
    future = {k: int(round(sol.x[j])) for k, j in thetaT.items() if sol.x[j] > 0.5}
    coverage = {k: (o, T) for (k, o, T), j in phi.items() if sol.x[j] > 0.5}
    return RebalancingSolution(immediate, future, coverage, sol.objective, sol.status,
                               time.perf_counter() - start, model)


def dispatch_rebalancing(solution: RebalancingSolution, idle_by_zone: dict[int, list[VehicleState]],
                         tours: list[SampledTour], zones: ZoneSystem, matrix: TravelTimeMatrix,
                         now: float) -> list[RebalanceCommand]:
    """Turn immediate zone-to-zone trips into vehicle commands.

    Each unit goes to the first pick-up of a tour it covers (centroid of the
    destination zone if none); the idle vehicle of the origin zone closest to
    that target is sent.  Units that stay inside their zone without a tour are
    not dispatched.
    """
    commands = []
    taken: set[int] = set()
    for (o, d), units in sorted(solution.immediate.items()):
        per_sample: dict[int, list[SampledTour]] = defaultdict(list)
        for k, (oo, T) in solution.coverage.items():
            if oo == o and T == 0 and tours[k].start_zone == d:
                per_sample[tours[k].sample].append(tours[k])
        covered = []
        if per_sample:
            s_best = min(per_sample, key=lambda s: (-len(per_sample[s]), s))
            covered = sorted(per_sample[s_best], key=lambda t: (t.start_time, t.tour, t.sub_tour))
        for n in range(units):
            if n < len(covered):
                target = covered[n].first_pickup_node
            elif o == d:
                continue
            else:
                target = zones.centroid[d]
            veh = closest_vehicle(idle_by_zone.get(o, []), target, matrix, taken)
            if veh is None:
                break
            taken.add(veh.vid)
            if veh.node == target and veh.next_node is None:
                continue
            commands.append(RebalanceCommand(veh.vid, target, d, now))
    return commands


class SamplingRebalancer(Rebalancer):
    name = "sampling"
    needs_forecast = True

    def __init__(self, horizon: float = 2700.0, n_samples: int = 3, gamma: float = 0.5,
                 strict_linkage: bool = False, time_limit: float = 30.0, dump_dir=None):
        super().__init__()
        self.horizon = horizon
        self.n_samples = n_samples
        self.gamma = gamma
        self.strict_linkage = strict_linkage
        self.time_limit = time_limit
        self.dump_dir = dump_dir
        self.last = None

    def rebalance(self, ctx: RebalancingContext) -> list[RebalanceCommand]:
        start = time.perf_counter()
        idle_by_zone = ctx.idle_by_zone()
        if ctx.forecast is None or not any(idle_by_zone.values()):
            self.call_times.append(time.perf_counter() - start)
            return []
        en_route = [v for v in ctx.vehicles if not v.is_idle]
        seeds = [int(x) for x in ctx.rng.integers(0, 2 ** 63 - 1, size=self.n_samples)]
        future = simulate_future_states(en_route, ctx.forecast, ctx.now, self.horizon, seeds, ctx.cons,
                                        ctx.pi, ctx.zones, ctx.matrix, ctx.requests, ctx.period)
        problem = RebalancingProblem(
            zones=list(ctx.zones.ids), costs=ctx.zones.cost,
            idle={z: len(vs) for z, vs in idle_by_zone.items()}, tours=future.tours,
            idle_increments=future.idle_increments, n_samples=self.n_samples,
            t_max=int(round(self.horizon / ctx.period)), period=ctx.period, now=ctx.now,
            gamma=self.gamma, strict_linkage=self.strict_linkage)
        dump = None
        if self.dump_dir is not None:
            dump = f"{self.dump_dir}/rebalancing_{int(ctx.now)}.lp"
        sol = build_and_solve_rebalancing(problem, self.time_limit, dump)
        commands = dispatch_rebalancing(sol, idle_by_zone, future.tours, ctx.zones, ctx.matrix, ctx.now)
        self.last = (problem, sol)
        self.call_times.append(time.perf_counter() - start)
        return commands
