"""KPIs from the event log, output files and experiment sweeps."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import platform
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy

from .demand import Request
from .engine import EVENT_COLUMNS, Scenario, SimulationResult, run
from .network import Network, ZoneSystem
from .scheduling import Event

LOG = logging.getLogger(__name__)


class TruncatedLog(ValueError):
    pass


def saved_distance(fleet_km: float, served_direct_km: float) -> float | None:
    """Pooling efficiency ``1 - fleet_km / served_direct_km``; ``None`` when nothing was served."""
    if served_direct_km <= 0:
        return None
    return (served_direct_km - fleet_km) / served_direct_km


@dataclass
class KpiReport:
    requests: int
    served_count: int
    rejected_count: int
    open_count: int
    service_rate: float
    avg_vehicle_revenue_hours: float
    vkm: float
    empty_vkm: float
    rebalancing_vkm: float
    saved_distance: float | None
    avg_waiting_time: float | None
    avg_detour: float | None
    revenue_s: float
    empty_drive_s: float
    idle_s: float
    dwell_s: float
    horizon_s: float
    fleet_size: int
    rebalancing_call_times: tuple = ()

    def time_budget_gap(self) -> float:
        """Fleet time not covered by revenue, empty driving, idling or dwelling."""
        used = self.revenue_s + self.empty_drive_s + self.idle_s + self.dwell_s
        return self.fleet_size * self.horizon_s - used

    def row(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("rebalancing_call_times")
        return out


class _Track:
    """Per-vehicle time decomposition into revenue, empty driving, idle and dwell time."""

    def __init__(self, node, t0):
        self.node = node
        self.occ = 0
        self.idle = True
        self.stat_t = t0
        self.revenue = self.empty_drive = self.idle_s = self.dwell = 0.0
        self.occ_revenue = 0.0
        self.occ_since = t0
        self.rebalancing = False
        self.km = self.empty_km = self.rebal_km = 0.0
        self.idle_by_node: dict[int, float] = defaultdict(float)

    def _stay(self, until):
        span = until - self.stat_t
        if span < -1e-6:
            raise TruncatedLog(f"overlapping vehicle activity before t={until}")
        if self.occ > 0:
            self.revenue += span
        elif self.idle:
            self.idle_s += span
            self.idle_by_node[self.node] += span
        else:
            self.dwell += span
        self.stat_t = until


def _replay(events: Iterable[Event], net: Network, end_time: float):
    tracks: dict[int, _Track] = {}
    for ev in events:
        if ev.vid < 0:
            continue
        if ev.kind == "place":
            tracks[ev.vid] = _Track(ev.node, ev.time)
            continue
        tr = tracks.get(ev.vid)
        if tr is None:
            raise TruncatedLog(f"vehicle {ev.vid} acts before being placed (t={ev.time})")
        if ev.kind == "node":
            e = net.edge(tr.node, ev.node)
            tr._stay(ev.time - e.travel_time)
            km = e.length / 1000.0
            tr.km += km
            if tr.occ > 0:
                tr.revenue += e.travel_time
            else:
                tr.empty_drive += e.travel_time
                tr.empty_km += km
                if tr.rebalancing:
                    tr.rebal_km += km
            tr.stat_t = ev.time
            tr.node = ev.node
        elif ev.kind in ("board", "alight"):
            tr._stay(ev.time)
            if tr.occ == 0 and ev.occupancy > 0:
                tr.occ_since = ev.time
            elif tr.occ > 0 and ev.occupancy == 0:
                tr.occ_revenue += ev.time - tr.occ_since
            tr.occ = ev.occupancy
        elif ev.kind in ("assign", "rebalance"):
            if tr.idle:
                tr._stay(ev.time)
                tr.idle = False
            tr.rebalancing = ev.kind == "rebalance"
        elif ev.kind == "idle":
            tr._stay(ev.time)
            tr.idle = True
            tr.rebalancing = False
    for tr in tracks.values():
        if tr.occ > 0:
            raise TruncatedLog(f"passengers still on board at the end of the log (t={tr.stat_t})")
        tr._stay(end_time)
    return tracks


def compute_kpis(events: list[Event], requests: Mapping[int, Request], net: Network,
                 fleet_size: int, end_time: float, call_times=()) -> KpiReport:
    """Recompute all KPIs from the event log alone (plus request data and edge lengths)."""
    last_t = -math.inf
    for ev in events:
        if ev.time < last_t - 1e-9:
            raise TruncatedLog(f"log not time-ordered after t={last_t}")
        last_t = ev.time
    tracks = _replay(events, net, end_time)
    if len(tracks) != fleet_size:
        raise TruncatedLog(f"{len(tracks)} vehicles placed, expected {fleet_size}")
    board, alight, rejected, logged = {}, {}, set(), set()
    for ev in events:
        if ev.kind == "board":
            board[ev.rid] = ev.time
        elif ev.kind == "alight":
            alight[ev.rid] = ev.time
        elif ev.kind == "reject":
            rejected.add(ev.rid)
        elif ev.kind == "request":
            logged.add(ev.rid)
    served = sorted(alight)
    missing = [rid for rid in served if rid not in board]
    if missing:
        raise TruncatedLog(f"request {missing[0]} alights without boarding")
    waits = [board[r] - requests[r].request_time for r in served]
    detours = [(alight[r] - board[r]) / requests[r].direct_time - 1.0 for r in served
               if requests[r].direct_time > 0]
    vids = sorted(tracks)
    vkm = sum(tracks[v].km for v in vids)
    direct_km = sum(requests[r].direct_distance for r in served) / 1000.0
    n = len(logged)
    return KpiReport(
        requests=n,
        served_count=len(served),
        rejected_count=len(rejected),
        open_count=n - len(served) - len(rejected),
        service_rate=len(served) / n if n else 0.0,
        avg_vehicle_revenue_hours=sum(tracks[v].occ_revenue for v in vids) / fleet_size / 3600.0,
        vkm=vkm,
        empty_vkm=sum(tracks[v].empty_km for v in vids),
        rebalancing_vkm=sum(tracks[v].rebal_km for v in vids),
        saved_distance=saved_distance(vkm, direct_km),
        avg_waiting_time=float(np.mean(waits)) if waits else None,
        avg_detour=float(np.mean(detours)) if detours else None,
        revenue_s=sum(tracks[v].revenue for v in vids),
        empty_drive_s=sum(tracks[v].empty_drive for v in vids),
        idle_s=sum(tracks[v].idle_s for v in vids),
        dwell_s=sum(tracks[v].dwell for v in vids),
        horizon_s=end_time,
        fleet_size=fleet_size,
        rebalancing_call_times=tuple(call_times),
    )


def report_for(result: SimulationResult) -> KpiReport:
    return compute_kpis(result.events, result.requests, result.world.net, result.scenario.fleet_size,
                        result.end_time, result.rebalancing_call_times)


def zonal_summary(events: list[Event], zones: ZoneSystem, net: Network, end_time: float):
    """Rows ``(zone_id, rejected_count, idle_vehicle_hours)``."""
    rejected = defaultdict(int)
    for ev in events:
        if ev.kind == "reject":
            rejected[zones.zone_of(ev.node)] += 1
    idle = defaultdict(float)
    for tr in _replay(events, net, end_time).values():
        for node, s in tr.idle_by_node.items():
            idle[zones.zone_of(node)] += s
    return [(z, rejected[z], idle[z] / 3600.0) for z in zones.ids]


# ---------------------------------------------------------------- files

def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    if x is None:
        return ""
    return str(x)


def write_events(events: Iterable[Event], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for ev in events:
            w.writerow([repr(float(ev.time)), ev.kind, ev.vid, ev.rid, ev.node, ev.occupancy])


def read_events(path) -> list[Event]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(Event(float(row["time_s"]), row["event_type"], int(row["vehicle_id"]),
                             int(row["request_id"]), int(row["node"]), int(row["occupancy"])))
    return out


def write_table(rows: list[dict], path) -> None:
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in keys])


def write_run_outputs(result: SimulationResult, out_dir, extra: dict | None = None) -> KpiReport:
    """Write ``kpis.csv``, ``events.csv``, ``fleet_states.csv``, ``zonal.csv`` and ``run_meta.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = report_for(result)
    row = {"seed": result.scenario.seed, "rebalancer": result.scenario.rebalancer, **(extra or {}), **rep.row()}
    write_table([row], out / "kpis.csv")
    write_events(result.events, out / "events.csv")
    write_table([dict(time_s=t, idle=a, en_route=b, rebalancing=c) for t, a, b, c in result.fleet_states],
                out / "fleet_states.csv")
    write_table([dict(zone_id=z, rejected_count=r, idle_vehicle_hours=h)
                 for z, r, h in zonal_summary(result.events, result.world.zones, result.world.net,
                                              result.end_time)], out / "zonal.csv")
    meta = {
        "config": dataclasses.asdict(result.scenario),
        "seed": result.scenario.seed,
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
        "rebalancing_call_times_s": list(result.rebalancing_call_times),
        "rebalancing_call_clock_s": list(result.rebalancing_call_clock),
        "wall_time_s": result.wall_time,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return rep


# ---------------------------------------------------------------- sweeps

def _one_run(args):
    sc, run_id, params, out_dir = args
    row = {"run_id": run_id, "seed": sc.seed, **params}
    try:
        result = run(sc)
        rep = write_run_outputs(result, Path(out_dir) / "runs" / run_id, params)
        row.update(rep.row())
        row["error"] = ""
    except Exception as exc:  # a failed run is recorded, the matrix continues
        LOG.exception("run %s failed", run_id)
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_experiment_matrix(base: Scenario, sweeps: dict[str, list], seeds: list[int], out_dir,
                          jobs: int = 1) -> list[dict]:
    """Run the Cartesian product of ``sweeps`` for every seed; one ``kpis.csv`` row per run."""
    for key in sweeps:
        if key not in Scenario.keys():
            raise ValueError(f"unknown sweep key {key!r}")
    keys = sorted(sweeps)
    combos = list(itertools.product(*(sweeps[k] for k in keys))) if keys else [()]
    tasks = []
    for combo in combos:
        params = dict(zip(keys, combo))
        for seed in seeds:
            sc = base.with_values({**params, "seed": seed})
            sc.validate()
            run_id = "_".join([f"{k}-{v}" for k, v in params.items()] + [f"seed-{seed}"])
            tasks.append((sc, run_id, params, str(out_dir)))
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_one_run, tasks))
    else:
        rows = [_one_run(t) for t in tasks]
    write_table(rows, Path(out_dir) / "kpis.csv")
    return rows
