"""Batch assignment of requests to vehicles.

Feasible schedules are enumerated per vehicle as vehicle-to-request bundles
(V2RBs) of increasing grade, then one bundle per vehicle is selected by an ILP.
Requests already assigned or on board stay with their vehicle: they are part of
the vehicle's base schedule and every bundle of that vehicle serves them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

from . import milp
from .demand import Request
from .network import TravelTimeMatrix
from .scheduling import (
    TIME_EPS, Schedule, ServiceConstraints, VehicleState, _end_time_if_feasible, dropoff,
    insertion_candidates, make_schedule, objective, pickup,
)

LOG = logging.getLogger(__name__)


@dataclass
class V2RB:
    vehicle_id: int
    request_set: frozenset
    schedules: list[Schedule]
    best_schedule: Schedule
    objective: float

    @property
    def grade(self) -> int:
        return len(self.request_set)


@dataclass
class BatchProblem:
    vehicles: list[VehicleState]
    unassigned: list[Request]
    requests: Mapping[int, Request]
    assigned: dict[int, int] = field(default_factory=dict)  # request id -> vehicle id

    def __post_init__(self):
        overlap = {r.id for r in self.unassigned} & set(self.assigned)
        if overlap:
            raise ValueError(f"requests both assigned and unassigned: {sorted(overlap)}")


@dataclass
class AssignmentResult:
    chosen: dict[int, V2RB]
    uncovered: list[int]
    objective: float
    status: str


def rr_compatible(a: Request, b: Request, now: float, cons: ServiceConstraints,
                  matrix: TravelTimeMatrix) -> bool:
    """Whether a fresh vehicle starting at the origin of one request can serve both."""
    tt = matrix.times
    reqs = {a.id: a, b.id: b}
    for first, second in ((a, b), (b, a)):
        p2, d1, d2 = pickup(second), dropoff(first), dropoff(second)
        for rest in ((d1, p2, d2), (p2, d1, d2), (p2, d2, d1)):
            stops = (pickup(first),) + rest
            if _end_time_if_feasible(stops, first.origin, now, 0, reqs, cons, tt) is not None:
                return True
    return False


def _feasible_insertions(sch: Schedule, node, t0, occ0, req, reqs, cons, tt):
    for _, cand in insertion_candidates(sch.stops, req):
        if _end_time_if_feasible(cand, node, t0, occ0, reqs, cons, tt) is not None:
            yield cand


def build_v2rbs(problem: BatchProblem, matrix: TravelTimeMatrix, cons: ServiceConstraints,
                pi: float, now: float, max_grade: int | None = None,
                max_bundles: int | None = None) -> dict[int, list[V2RB]]:
    """Enumerate all V2RBs per vehicle by increasing grade.

    A grade-1 bundle needs the vehicle to reach the request within the waiting
    budget; a grade-2 bundle needs the pair to be servable by a fresh vehicle
    starting at one of the origins; a grade-n bundle needs all its (n-1)-subsets.
    Schedules of a new bundle are all feasible insertions of the added request
    into every schedule of its parent.  Vehicles with obligations also get a
    grade-0 bundle holding their current schedule.
    """
    tt = matrix.times
    reqs = dict(problem.requests)
    for r in problem.unassigned:
        reqs[r.id] = r
    new = sorted(problem.unassigned, key=lambda r: r.id)
    pair_ok: dict[tuple[int, int], bool] = {}

    def compatible(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in pair_ok:
            pair_ok[key] = rr_compatible(reqs[key[0]], reqs[key[1]], now, cons, matrix)
        return pair_ok[key]

    out: dict[int, list[V2RB]] = {}
    for veh in sorted(problem.vehicles, key=lambda v: v.vid):
        node, t0 = veh.anchor(now)
        occ0 = len(veh.onboard)
        base = make_schedule(veh.stops, node, t0, now, veh.onboard, reqs, cons, tt)
        bundles: dict[frozenset, list[tuple]] = {}
        result: list[V2RB] = []

        def add(rset, stop_lists):
            scheds = [make_schedule(s, node, t0, now, veh.onboard, reqs, cons, tt) for s in stop_lists]
            best = min(scheds, key=lambda s: objective(s, pi))
            result.append(V2RB(veh.vid, rset, scheds, best, objective(best, pi)))

        if veh.stops or veh.onboard:
            add(frozenset(), [tuple(veh.stops)])
        level: dict[frozenset, list[tuple]] = {}
        for r in new:
            if t0 + tt[node][r.origin] > r.request_time + cons.t_max_wait + TIME_EPS:
                continue
            cands = [tuple(c) for c in _feasible_insertions(base, node, t0, occ0, r, reqs, cons, tt)]
            if cands:
                level[frozenset((r.id,))] = cands
        grade = 1
        while level:
            for rset in sorted(level, key=lambda s: sorted(s)):
                bundles[rset] = level[rset]
                add(rset, level[rset])
                if max_bundles is not None and len(result) >= max_bundles:
                    break
            if max_bundles is not None and len(result) >= max_bundles:
                break
            if max_grade is not None and grade >= max_grade:
                break
            singles = sorted(next(iter(s)) for s in bundles if len(s) == 1)
            nxt: dict[frozenset, list[tuple]] = {}
            for rset in sorted(level, key=lambda s: sorted(s)):
                top = max(rset)
                for rid in singles:
                    if rid <= top:
                        continue
                    grown = rset | {rid}
                    if grade == 1 and not compatible(top, rid):
                        continue
                    if any((grown - {x}) not in bundles for x in grown):
                        continue
                    r = reqs[rid]
                    cands = []
                    for stops in level[rset]:
                        parent = Schedule(stops)
                        cands.extend(tuple(c) for c in
                                     _feasible_insertions(parent, node, t0, occ0, r, reqs, cons, tt))
                    if cands:
                        nxt[grown] = cands
            level = nxt
            grade += 1
        out[veh.vid] = result
    return out


def solve_assignment(problem: BatchProblem, v2rbs: dict[int, list[V2RB]],
                     time_limit: float = 30.0) -> AssignmentResult:
    """Pick at most one bundle per vehicle minimising the summed bundle objectives.

    Unassigned requests are covered at most once, previously assigned ones exactly
    once (by their own vehicle).  Requests left uncovered are reported, not rejected.
    """
    model = milp.LinearModel("assignment", "min")
    cols: list[V2RB] = []
    per_vehicle: dict[int, list[int]] = {}
    per_request: dict[int, list[int]] = {}
    for vid in sorted(v2rbs):
        for b in v2rbs[vid]:
            j = model.add_var(f"z_{vid}_{len(per_vehicle.get(vid, []))}", kind=milp.BINARY)
            cols.append(b)
            per_vehicle.setdefault(vid, []).append(j)
            for rid in b.request_set:
                per_request.setdefault(rid, []).append(j)
    model.set_objective({j: b.objective for j, b in enumerate(cols)})
    for vid, js in per_vehicle.items():
        model.add_constr({j: 1.0 for j in js}, milp.LE, 1.0, f"veh_{vid}")
    for r in sorted(problem.unassigned, key=lambda r: r.id):
        js = per_request.get(r.id, [])
        if js:
            model.add_constr({j: 1.0 for j in js}, milp.LE, 1.0, f"new_{r.id}")
    for rid in sorted(problem.assigned):
        vid = problem.assigned[rid]
        js = per_vehicle.get(vid, [])
        if not js:
            raise milp_infeasible(rid)
        model.add_constr({j: 1.0 for j in js}, milp.EQ, 1.0, f"old_{rid}")
    sol = milp.solve(model, time_limit=time_limit)
    if sol.status == milp.INFEASIBLE:
        raise milp_infeasible(None)
    chosen: dict[int, V2RB] = {}
    if sol.x:
        for j, b in enumerate(cols):
            if sol.x[j] > 0.5:
                chosen[b.vehicle_id] = b
    covered = set().union(*(b.request_set for b in chosen.values())) if chosen else set()
    uncovered = sorted(r.id for r in problem.unassigned if r.id not in covered)
    obj = sum(b.objective for b in chosen.values())
    return AssignmentResult(chosen, uncovered, obj, sol.status)


class AssignmentInfeasible(RuntimeError):
    pass


def milp_infeasible(rid):
    msg = "assignment ILP infeasible"
    if rid is not None:
        msg += f": previously assigned request {rid} appears in no bundle"
    return AssignmentInfeasible(msg)
