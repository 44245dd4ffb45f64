"""Vehicle schedules: feasibility, objective, insertion and execution in time."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

from .demand import Request
from .network import TravelTimeMatrix

IDLE = "idle"
EN_ROUTE = "en_route"
REBALANCING = "rebalancing"

# absolute slack on time windows; planned times are recomputed from float sums
TIME_EPS = 1e-6
DEFAULT_PI = 1e6


@dataclass(frozen=True)
class ServiceConstraints:
    t_max_wait: float = 360.0
    max_rel_detour: float = 0.4
    capacity: int = 4
    boarding_duration: float = 0.0

    def __post_init__(self):
        if self.t_max_wait < 0 or self.max_rel_detour < 0 or self.boarding_duration < 0:
            raise ValueError("service constraints must be nonnegative")
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")


@dataclass(frozen=True)
class Stop:
    node: int
    boarding: frozenset = frozenset()
    alighting: frozenset = frozenset()
    planned_arrival: float = 0.0
    planned_departure: float = 0.0

    def __post_init__(self):
        if self.boarding & self.alighting:
            raise ValueError("a request cannot board and alight at the same stop")

    def key(self):
        """Identity of the stop without planned times."""
        return (self.node, self.boarding, self.alighting)


def pickup(req: Request) -> Stop:
    return Stop(req.origin, frozenset((req.id,)))


def dropoff(req: Request) -> Stop:
    return Stop(req.destination, alighting=frozenset((req.id,)))


@dataclass(frozen=True)
class Schedule:
    stops: tuple = ()
    served: frozenset = frozenset()
    system_time: float = 0.0

    @property
    def end_time(self) -> float:
        return self.stops[-1].planned_departure if self.stops else math.nan

    def keys(self):
        return tuple(s.key() for s in self.stops)

    def __len__(self):
        return len(self.stops)


EMPTY_SCHEDULE = Schedule()


class Violation(NamedTuple):
    kind: str  # precedence | waiting | detour | capacity
    request_id: int | None = None
    stop_index: int | None = None


class UnknownRequest(KeyError):
    pass


@dataclass
class VehicleState:
    """Mutable vehicle state owned by the simulation.

    ``node`` is the last node reached; while driving on an edge ``next_node`` is
    its head and ``edge_elapsed`` the seconds already driven on it.
    ``stops`` is the remaining part of the assigned schedule.
    """

    vid: int
    node: int
    next_node: int | None = None
    edge_elapsed: float = 0.0
    edge_time: float = 0.0
    path: list = field(default_factory=list)
    stops: list = field(default_factory=list)
    onboard: set = field(default_factory=set)
    status: str = IDLE
    rebalance_target: int | None = None
    busy_until: float = -math.inf

    @property
    def occupancy(self) -> int:
        return len(self.onboard)

    @property
    def position(self):
        if self.next_node is None:
            return self.node
        return (self.node, self.next_node, self.edge_elapsed)

    @property
    def is_idle(self) -> bool:
        return self.status == IDLE

    def anchor(self, now: float) -> tuple[int, float]:
        """Node from which routing continues and the time the vehicle is free there."""
        if self.next_node is not None:
            return self.next_node, max(now + self.edge_time - self.edge_elapsed, self.busy_until)
        return self.node, max(now, self.busy_until)

    def schedule(self, now: float) -> Schedule:
        return Schedule(tuple(self.stops), served_by(self.stops, self.onboard),
                        (self.stops[-1].planned_departure - now) if self.stops else 0.0)

    def set_stops(self, stops: Sequence[Stop]) -> None:
        self.stops = list(stops)
        self.rebalance_target = None
        self.path = [self.next_node] if self.next_node is not None else []
        self.status = EN_ROUTE if self.stops else IDLE

    def send_to(self, target: int) -> None:
        """Start an empty repositioning trip (supersedes an unfinished one)."""
        if self.stops or self.onboard:
            raise ValueError(f"vehicle {self.vid} is not free for repositioning")
        self.rebalance_target = target
        self.path = [self.next_node] if self.next_node is not None else []
        self.status = REBALANCING

    def copy(self) -> "VehicleState":
        return VehicleState(self.vid, self.node, self.next_node, self.edge_elapsed, self.edge_time,
                            list(self.path), list(self.stops), set(self.onboard), self.status,
                            self.rebalance_target, self.busy_until)


def served_by(stops: Sequence[Stop], onboard=()) -> frozenset:
    rids = set(onboard)
    for s in stops:
        rids.update(s.boarding)
        rids.update(s.alighting)
    return frozenset(rids)


# ---------------------------------------------------------------- feasibility

def _precedence_ok(stops: Sequence[Stop], onboard) -> Violation | None:
    boarded = set()
    alighted = set()
    for k, s in enumerate(stops):
        for rid in s.alighting:
            if rid in alighted or (rid not in boarded and rid not in onboard):
                return Violation("precedence", rid, k)
            alighted.add(rid)
        for rid in s.boarding:
            if rid in boarded or rid in onboard or rid in alighted:
                return Violation("precedence", rid, k)
            boarded.add(rid)
    missing = (boarded | set(onboard)) - alighted
    if missing:
        return Violation("precedence", min(missing), len(stops))
    return None


def plan_times(stops: Sequence[Stop], start_node: int, start_time: float,
               requests: Mapping[int, Request], cons: ServiceConstraints,
               tt) -> list[tuple[float, float]]:
    """Arrival and departure time at each stop when driving fastest paths.

    Service at a stop starts no earlier than the request time of anyone boarding.
    """
    out = []
    t = start_time
    pos = start_node
    bd = cons.boarding_duration
    for s in stops:
        t += tt[pos][s.node]
        pos = s.node
        arr = t
        for rid in s.boarding:
            rt = requests[rid].request_time
            if rt > t:
                t = rt
        if s.boarding or s.alighting:
            t += bd
        out.append((arr, t))
    return out


def check_stops(stops: Sequence[Stop], start_node: int, start_time: float, onboard,
                requests: Mapping[int, Request], cons: ServiceConstraints, tt) -> Violation | None:
    """First violated feasibility condition of a stop sequence, or ``None``."""
    for s in stops:
        for rid in s.boarding | s.alighting:
            if rid not in requests:
                raise UnknownRequest(rid)
    v = _precedence_ok(stops, onboard)
    if v is not None:
        return v
    occ = len(onboard)
    cap_violation = None
    t = start_time
    pos = start_node
    wait = cons.t_max_wait
    det = 1.0 + cons.max_rel_detour
    bd = cons.boarding_duration
    for k, s in enumerate(stops):
        t += tt[pos][s.node]
        pos = s.node
        for rid in s.boarding:
            rt = requests[rid].request_time
            if rt > t:
                t = rt
        for rid in s.boarding:
            if t > requests[rid].request_time + wait + TIME_EPS:
                return Violation("waiting", rid, k)
        for rid in s.alighting:
            r = requests[rid]
            if t > r.request_time + wait + det * r.direct_time + TIME_EPS:
                return Violation("detour", rid, k)
        occ += len(s.boarding) - len(s.alighting)
        if occ > cons.capacity and cap_violation is None:
            cap_violation = Violation("capacity", None, k)
        if s.boarding or s.alighting:
            t += bd
    return cap_violation


def check_feasible(sch: Schedule, veh: VehicleState, requests: Mapping[int, Request],
                   cons: ServiceConstraints, now: float, matrix: TravelTimeMatrix) -> Violation | None:
    """``None`` when ``sch`` is feasible for ``veh`` starting at ``now``, else the first violation."""
    node, t0 = veh.anchor(now)
    return check_stops(sch.stops, node, t0, veh.onboard, requests, cons, matrix.times)


def objective(sch: Schedule, pi: float = DEFAULT_PI) -> float:
    """Operator cost of a schedule: system time minus ``pi`` per served request."""
    return sch.system_time - pi * len(sch.served)


def make_schedule(stops: Sequence[Stop], start_node: int, start_time: float, now: float, onboard,
                  requests: Mapping[int, Request], cons: ServiceConstraints, tt) -> Schedule:
    times = plan_times(stops, start_node, start_time, requests, cons, tt)
    timed = tuple(Stop(s.node, s.boarding, s.alighting, a, d) for s, (a, d) in zip(stops, times))
    tau = (times[-1][1] - now) if times else 0.0
    return Schedule(timed, served_by(stops, onboard), tau)


def _end_time_if_feasible(stops, start_node, start_time, occ0, requests, cons, tt):
    """Departure time at the last stop, or ``None`` if a time window or capacity fails.

    Precedence is assumed (callers only build precedence-respecting sequences).
    """
    t = start_time
    pos = start_node
    occ = occ0
    wait = cons.t_max_wait
    det = 1.0 + cons.max_rel_detour
    bd = cons.boarding_duration
    cap = cons.capacity
    for s in stops:
        t += tt[pos][s.node]
        pos = s.node
        if s.boarding:
            for rid in s.boarding:
                rt = requests[rid].request_time
                if rt > t:
                    t = rt
            for rid in s.boarding:
                if t > requests[rid].request_time + wait + TIME_EPS:
                    return None
        for rid in s.alighting:
            r = requests[rid]
            if t > r.request_time + wait + det * r.direct_time + TIME_EPS:
                return None
        occ += len(s.boarding) - len(s.alighting)
        if occ > cap:
            return None
        if s.boarding or s.alighting:
            t += bd
    return t


def insertion_candidates(stops: Sequence[Stop], req: Request):
    """Every stop list obtained by inserting pick-up and drop-off of ``req`` without
    reordering ``stops``; yields ``((i, j), stop_list)`` with ``i <= j``."""
    p, d = pickup(req), dropoff(req)
    stops = list(stops)
    n = len(stops)
    for i in range(n + 1):
        head = stops[:i] + [p]
        for j in range(i, n + 1):
            yield (i, j), head + stops[i:j] + [d] + stops[j:]


def insert_request(sch: Schedule, veh: VehicleState, req: Request, cons: ServiceConstraints,
                   pi: float, now: float, matrix: TravelTimeMatrix,
                   requests: Mapping[int, Request]) -> Schedule | None:
    """Cheapest feasible insertion of ``req`` into ``sch`` (stop order of ``sch`` kept).

    Returns ``None`` when the vehicle cannot reach the origin within the waiting
    budget or no insertion position pair is feasible.
    """
    tt = matrix.times
    node, t0 = veh.anchor(now)
    if t0 + tt[node][req.origin] > req.request_time + cons.t_max_wait + TIME_EPS:
        return None
    if req.id not in requests:
        requests = {**requests, req.id: req}
    best_end, best_stops = None, None
    occ0 = len(veh.onboard)
    for _, cand in insertion_candidates(sch.stops, req):
        end = _end_time_if_feasible(cand, node, t0, occ0, requests, cons, tt)
        if end is not None and (best_end is None or end < best_end - 1e-9):
            best_end, best_stops = end, cand
    if best_stops is None:
        return None
    return make_schedule(best_stops, node, t0, now, veh.onboard, requests, cons, tt)


# ---------------------------------------------------------------- execution

class Event(NamedTuple):
    time: float
    kind: str
    vid: int
    rid: int
    node: int
    occupancy: int


def _serve_stop(veh: VehicleState, stop: Stop, t: float, requests, cons, events) -> float:
    """Board/alight at ``stop`` starting no earlier than ``t``; returns the departure time."""
    for rid in stop.boarding:
        rt = requests[rid].request_time
        if rt > t:
            t = rt
    for rid in sorted(stop.alighting):
        veh.onboard.discard(rid)
        events.append(Event(t, "alight", veh.vid, rid, stop.node, len(veh.onboard)))
    for rid in sorted(stop.boarding):
        veh.onboard.add(rid)
        events.append(Event(t, "board", veh.vid, rid, stop.node, len(veh.onboard)))
    if stop.boarding or stop.alighting:
        t += cons.boarding_duration
    return t


def advance_schedule(veh: VehicleState, now: float, dt: float, matrix: TravelTimeMatrix,
                     requests: Mapping[int, Request], cons: ServiceConstraints) -> list[Event]:
    """Move ``veh`` along its schedule (or repositioning trip) from ``now`` to ``now + dt``.

    Returns the events in time order: ``node`` when a node is reached, ``board`` /
    ``alight`` at stops, ``idle`` when the schedule or trip is finished.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    events: list[Event] = []
    t = now
    end = now + dt
    net = matrix.net
    while True:
        if veh.busy_until > t:
            if veh.busy_until > end:
                break
            t = veh.busy_until
        if veh.next_node is None and not veh.stops and veh.rebalance_target is None:
            if veh.status != IDLE:
                veh.status = IDLE
                events.append(Event(t, "idle", veh.vid, -1, veh.node, len(veh.onboard)))
            break
        if veh.next_node is None:
            target = veh.stops[0].node if veh.stops else veh.rebalance_target
            if veh.node == target:
                if veh.stops:
                    stop = veh.stops.pop(0)
                    veh.busy_until = _serve_stop(veh, stop, t, requests, cons, events)
                else:
                    veh.rebalance_target = None
                continue
            if not veh.path:
                veh.path = matrix.path(veh.node, target)[1:]
            nxt = veh.path[0]
            veh.next_node = nxt
            veh.edge_time = net.edge(veh.node, nxt).travel_time
            veh.edge_elapsed = 0.0
        if t >= end:
            break
        remaining = veh.edge_time - veh.edge_elapsed
        if t + remaining <= end:
            t += remaining
            veh.node = veh.next_node
            veh.next_node = None
            veh.edge_elapsed = 0.0
            if veh.path and veh.path[0] == veh.node:
                veh.path.pop(0)
            events.append(Event(t, "node", veh.vid, -1, veh.node, len(veh.onboard)))
        else:
            veh.edge_elapsed += end - t
            t = end
            break
    return events


# ---------------------------------------------------------------- sub-schedules

def split_idle_subschedules(stops: Sequence[Stop], onboard=()) -> list[tuple]:
    """Cut a stop sequence after every stop (but the last) at which the vehicle runs empty.

    The returned segments concatenate to the original sequence.
    """
    segments = []
    current = []
    occ = len(onboard)
    n = len(stops)
    for k, s in enumerate(stops):
        current.append(s)
        occ += len(s.boarding) - len(s.alighting)
        if occ == 0 and k < n - 1:
            segments.append(tuple(current))
            current = []
    if current:
        segments.append(tuple(current))
    return segments
