"""Requests, trip-record filtering, demand forecasts and Poisson request sampling."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .network import TravelTimeMatrix, ZoneSystem

LOG = logging.getLogger(__name__)


@dataclass(frozen=True)
class Request:
    id: int
    origin: int
    destination: int
    request_time: float
    direct_time: float
    direct_distance: float

    def latest_pickup(self, t_max_wait: float) -> float:
        return self.request_time + t_max_wait

    def latest_dropoff(self, t_max_wait: float, max_rel_detour: float) -> float:
        return self.request_time + t_max_wait + (1.0 + max_rel_detour) * self.direct_time


def make_request(rid: int, origin: int, destination: int, request_time: float,
                 matrix: TravelTimeMatrix) -> Request:
    if origin == destination:
        raise ValueError(f"request {rid}: origin equals destination")
    return Request(rid, origin, destination, float(request_time),
                   matrix.times[origin][destination], matrix.dists[origin][destination])


# ---------------------------------------------------------------- trip records

@dataclass(frozen=True)
class TripFilterRules:
    min_distance_km: float = 0.1
    max_distance_km: float = 100.0
    min_duration_s: float = 60.0
    max_duration_s: float = 5 * 3600.0
    min_speed_kmh: float = 5.0
    max_speed_kmh: float = 130.0

    def __post_init__(self):
        for lo, hi in ((self.min_distance_km, self.max_distance_km),
                       (self.min_duration_s, self.max_duration_s),
                       (self.min_speed_kmh, self.max_speed_kmh)):
            if not lo < hi:
                raise ValueError(f"filter bounds must satisfy min < max, got {lo} >= {hi}")


def filter_trips(records: Iterable[dict], rules: TripFilterRules = TripFilterRules(),
                 stats: Counter | None = None) -> list[dict]:
    """Drop presumably faulty trip records.

    Each record needs ``distance_km`` and ``duration_s``; the average speed is
    derived.  Records outside any bound are removed (values on a bound are kept).
    Records missing a field are dropped and counted under ``stats["missing_field"]``.
    """
    stats = stats if stats is not None else Counter()
    kept = []
    for rec in records:
        try:
            dist = float(rec["distance_km"])
            dur = float(rec["duration_s"])
        except (KeyError, TypeError, ValueError):
            stats["missing_field"] += 1
            continue
        if dur <= 0:
            stats["duration"] += 1
            continue
        speed = dist / (dur / 3600.0)
        if dist > rules.max_distance_km or dist < rules.min_distance_km:
            stats["distance"] += 1
        elif dur > rules.max_duration_s or dur < rules.min_duration_s:
            stats["duration"] += 1
        elif speed > rules.max_speed_kmh or speed < rules.min_speed_kmh:
            stats["speed"] += 1
        else:
            kept.append(rec)
    return kept


def trips_to_requests(records: Iterable[dict], areas: dict, matrix: TravelTimeMatrix,
                      rng: np.random.Generator, interval_s: float = 900.0,
                      subsample: float = 1.0, stats: Counter | None = None,
                      first_id: int = 0) -> list[Request]:
    """Turn area-level trip records into node-level requests.

    ``areas`` maps an area key to its access nodes.  Each record carries
    ``origin_area``, ``destination_area`` and ``start_s`` (start of the reported
    time interval).  Origin and destination are drawn uniformly from the area
    nodes (the destination is redrawn while it equals the origin), the request
    time uniformly in whole seconds from ``[start_s, start_s + interval_s)``.
    With ``subsample < 1`` every record is kept independently with that probability.
    """
    stats = stats if stats is not None else Counter()
    out = []
    rid = first_id
    for rec in records:
        if subsample < 1.0 and rng.random() >= subsample:
            stats["subsampled_out"] += 1
            continue
        o_nodes = areas.get(rec["origin_area"]) or []
        d_nodes = areas.get(rec["destination_area"]) or []
        if not o_nodes or not d_nodes:
            stats["empty_area"] += 1
            continue
        if len(o_nodes) == 1 and list(d_nodes) == list(o_nodes):
            stats["degenerate"] += 1
            continue
        o = o_nodes[rng.integers(len(o_nodes))]
        d = d_nodes[rng.integers(len(d_nodes))]
        while d == o:
            if len(d_nodes) == 1:
                o = o_nodes[rng.integers(len(o_nodes))]
            else:
                d = d_nodes[rng.integers(len(d_nodes))]
        t = float(rec["start_s"]) + float(rng.integers(int(interval_s)))
        out.append(make_request(rid, int(o), int(d), t, matrix))
        rid += 1
    out.sort(key=lambda r: (r.request_time, r.id))
    return out


# ---------------------------------------------------------------- forecasts

class ForecastMatrix:
    """Expected requests ``rate[(i, j, T)]`` per zone pair and time bin of width ``bin_s``.

    Bins start at multiples of ``bin_s``.  Missing cells have rate zero.
    """

    def __init__(self, bin_s: float, rates: dict[tuple[int, int, float], float] | None = None):
        self.bin_s = float(bin_s)
        self.rates: dict[tuple[int, int, float], float] = {}
        for (i, j, t), lam in (rates or {}).items():
            if lam < 0:
                raise ValueError("forecast rates must be nonnegative")
            if abs(t / self.bin_s - round(t / self.bin_s)) > 1e-9:
                raise ValueError(f"bin start {t} not aligned to {self.bin_s}")
            if lam > 0:
                self.rates[(i, j, float(t))] = float(lam)

    def rate(self, i: int, j: int, t: float) -> float:
        return self.rates.get((i, j, float(t)), 0.0)

    def bin_start(self, t: float) -> float:
        return math.floor(t / self.bin_s + 1e-9) * self.bin_s

    def bins(self, start: float, end: float) -> list[float]:
        """Bin starts covering ``[start, end)``."""
        b = self.bin_start(start)
        out = []
        while b < end - 1e-9:
            out.append(b)
            b += self.bin_s
        return out

    def cells(self, start: float, end: float) -> list[tuple[int, int, float, float]]:
        wanted = set(self.bins(start, end))
        return sorted((i, j, t, lam) for (i, j, t), lam in self.rates.items() if t in wanted)

    def od_totals(self, start: float, end: float) -> dict[tuple[int, int], float]:
        out: dict[tuple[int, int], float] = defaultdict(float)
        for i, j, _, lam in self.cells(start, end):
            out[(i, j)] += lam
        return dict(out)

    def total(self) -> float:
        return sum(self.rates.values())

    def validate(self, zones: ZoneSystem) -> None:
        for (i, j, _), lam in self.rates.items():
            if lam > 0 and (not zones.members.get(i) or not zones.members.get(j)):
                raise ValueError(f"positive rate for zone pair ({i}, {j}) without access nodes")


def perfect_forecast(future_requests: Iterable[Request], zones: ZoneSystem, bin_s: float) -> ForecastMatrix:
    counts: Counter = Counter()
    for r in future_requests:
        t = math.floor(r.request_time / bin_s) * bin_s
        counts[(zones.zone_of(r.origin), zones.zone_of(r.destination), float(t))] += 1
    return ForecastMatrix(bin_s, dict(counts))


def myopic_forecast(history: Iterable[Request], now: float, bin_s: float, horizon: float,
                    zones: ZoneSystem) -> ForecastMatrix:
    """Use the zone-pair counts of ``[now - bin_s, now)`` as the rate for every future bin."""
    counts: Counter = Counter()
    for r in history:
        if now - bin_s <= r.request_time < now:
            counts[(zones.zone_of(r.origin), zones.zone_of(r.destination))] += 1
    fc = ForecastMatrix(bin_s)
    first = fc.bin_start(now)
    n_bins = max(1, int(round(horizon / bin_s)))
    for k in range(n_bins):
        t = first + k * bin_s
        for (i, j), c in counts.items():
            fc.rates[(i, j, float(t))] = float(c)
    return fc


def sample_requests(fc: ForecastMatrix, start: float, horizon: float, zones: ZoneSystem,
                    matrix: TravelTimeMatrix, rng: np.random.Generator,
                    first_id: int = 0) -> list[Request]:
    """Draw artificial requests for the bins covering ``[start, start + horizon)``.

    Per cell the count is Poisson distributed with the forecast rate; origins and
    destinations are uniform over the zones' access nodes (destination redrawn on
    collision) and request times uniform within the bin, clipped to ``start``.
    """
    out = []
    rid = first_id
    for i, j, t, lam in fc.cells(start, start + horizon):
        n = int(rng.poisson(lam))
        if n == 0:
            continue
        o_nodes, d_nodes = zones.members.get(i), zones.members.get(j)
        if not o_nodes or not d_nodes:
            raise ValueError(f"positive rate for zone pair ({i}, {j}) without access nodes")
        if len(o_nodes) == 1 and o_nodes == d_nodes:
            continue
        lo = max(t, start)
        for _ in range(n):
            o = o_nodes[rng.integers(len(o_nodes))]
            d = d_nodes[rng.integers(len(d_nodes))]
            while d == o:
                if len(d_nodes) == 1:
                    o = o_nodes[rng.integers(len(o_nodes))]
                else:
                    d = d_nodes[rng.integers(len(d_nodes))]
            rt = lo + rng.random() * (t + fc.bin_s - lo)
            out.append((rt, o, d))
    out.sort()
    reqs = []
    for rt, o, d in out:
        reqs.append(make_request(rid, o, d, rt, matrix))
        rid += 1
    return reqs


# ---------------------------------------------------------------- file formats

def load_requests(path, matrix: TravelTimeMatrix) -> list[Request]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(make_request(int(row["request_id"]), int(row["origin_node"]),
                                    int(row["destination_node"]), float(row["request_time_s"]), matrix))
    out.sort(key=lambda r: (r.request_time, r.id))
    return out


def write_requests(requests: Iterable[Request], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["request_id", "origin_node", "destination_node", "request_time_s"])
        for r in sorted(requests, key=lambda r: (r.request_time, r.id)):
            w.writerow([r.id, r.origin, r.destination, r.request_time])


def load_forecast(path, bin_s: float) -> ForecastMatrix:
    rates = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["origin_zone"]), int(row["destination_zone"]), float(row["bin_start_s"]))
            rates[key] = rates.get(key, 0.0) + float(row["rate"])
    return ForecastMatrix(bin_s, rates)


def write_forecast(fc: ForecastMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_zone", "destination_zone", "bin_start_s", "rate"])
        for (i, j, t), lam in sorted(fc.rates.items()):
            w.writerow([i, j, t, lam])


# ---------------------------------------------------------------- synthetic demand

def asymmetric_grid_demand(rows: int, cols: int, rate_per_hour: float, duration_s: float,
                           matrix: TravelTimeMatrix, rng: np.random.Generator,
                           directed_share: float = 0.9) -> list[Request]:
    """Poisson demand on a grid where ``directed_share`` of trips run from the
    western third of the columns to the eastern third; the rest are uniform."""
    third = max(1, cols // 3)
    west = [r * cols + c for r in range(rows) for c in range(third)]
    east = [r * cols + c for r in range(rows) for c in range(cols - third, cols)]
    every = list(range(rows * cols))
    n = int(rng.poisson(rate_per_hour * duration_s / 3600.0))
    times = np.sort(rng.random(n) * duration_s)
    out = []
    for k, t in enumerate(times):
        if rng.random() < directed_share:
            o, d = west[rng.integers(len(west))], east[rng.integers(len(east))]
        else:
            o = every[rng.integers(len(every))]
            d = every[rng.integers(len(every))]
            while d == o:
                d = every[rng.integers(len(every))]
        out.append(make_request(k, int(o), int(d), float(np.floor(t)), matrix))
    return out


def uniform_demand(nodes: list[int], rate_per_hour: float, duration_s: float,
                   matrix: TravelTimeMatrix, rng: np.random.Generator) -> list[Request]:
    nodes = sorted(nodes)
    n = int(rng.poisson(rate_per_hour * duration_s / 3600.0))
    times = np.sort(rng.random(n) * duration_s)
    out = []
    for k, t in enumerate(times):
        o = nodes[rng.integers(len(nodes))]
        d = nodes[rng.integers(len(nodes))]
        while d == o:
            d = nodes[rng.integers(len(nodes))]
        out.append(make_request(k, int(o), int(d), float(np.floor(t)), matrix))
    return out
